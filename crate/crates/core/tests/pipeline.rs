use gaitlab::config::RunConfig;
use gaitlab::data::{DatasetIndex, FrameBank};
use gaitlab::eval::{reconstruction_mse, run_protocol, Protocol};
use gaitlab::model::GaitStream;
use gaitlab::train::{load_model, train};
use gaitlab::walker::{generate_dataset, GenerateConfig};
use tempfile::TempDir;

fn tiny(dataset: &std::path::Path, out: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "d_a=3\nd_g=2\nchannels=2,2,2,2\nhidden=4\nlstm_layers=2\nbatch_clips=4\nwindow=4\n\
         holdout=clips\ntrain_clips=1\nepochs=2\nsave_every=1\nlr=0.001\nseed=4",
    )
    .unwrap();
    cfg.dataset = dataset.to_path_buf();
    cfg.out = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

#[test]
fn generate_train_and_evaluate() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let gen = GenerateConfig {
        n_subjects: 3,
        clips_per_condition: 2,
        clip_len: 20,
        seed: 2,
        ..GenerateConfig::default()
    };
    assert_eq!(generate_dataset(&gen, &data, false).unwrap(), 12);

    let run = tmp.path().join("run");
    let cfg = tiny(&data, &run);
    let index = DatasetIndex::load(&data).unwrap();
    let (train_index, held_out) = cfg.split(&index).unwrap();
    assert_eq!((train_index.clips().len(), held_out.clips().len()), (6, 6));
    let bank = FrameBank::load(&train_index).unwrap();
    let outcome = train(&cfg, &train_index, &bank, Some(&run)).unwrap();
    assert_eq!(outcome.checkpoints.len(), 3);
    assert_eq!(outcome.log.len(), 4);
    assert!(outcome.log.iter().all(|r| r.total.is_finite() && r.xrecon.is_some()));

    // The saved checkpoint is the in-memory model.
    let loaded = load_model(&run).unwrap();
    assert_eq!(loaded.params.len(), outcome.net.params.len());
    for (a, b) in loaded.params.iter().zip(outcome.net.params.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }

    let protocol = Protocol::condition_change("NM", "CL");
    let (report, scores) = run_protocol(&protocol, &held_out, &loaded).unwrap();
    assert_eq!((scores.rows(), scores.cols()), (3, 3));
    let rank1 = report.get("rank-1").unwrap();
    assert!((0.0..=1.0).contains(&rank1));
    assert_eq!(report.get("rank-5"), Some(1.0));
    let mse = reconstruction_mse(&loaded, &held_out, &held_out.eligible(), 5).unwrap();
    assert!(mse.is_finite() && mse > 0.0);

    // Streaming one frame at a time reaches the whole-clip signature.
    let frames = held_out.load_clip(0).unwrap();
    let whole = loaded.gait_signature(&frames).unwrap();
    let mut stream = GaitStream::new(&loaded);
    let mut last = Vec::new();
    for f in &frames {
        last = stream.push(f).unwrap().to_vec();
    }
    for (a, b) in whole.iter().zip(&last) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let gen = GenerateConfig {
        n_subjects: 2,
        clips_per_condition: 1,
        clip_len: 20,
        ..GenerateConfig::default()
    };
    generate_dataset(&gen, &data, false).unwrap();
    let index = DatasetIndex::load(&data).unwrap();
    let mut cfg = tiny(&data, tmp.path());
    cfg.holdout = gaitlab::config::Holdout::Subjects;
    cfg.train_subjects = 2;
    let bank = FrameBank::load(&index).unwrap();
    let a = train(&cfg, &index, &bank, None).unwrap();
    let b = train(&cfg, &index, &bank, None).unwrap();
    assert_eq!(a.log, b.log);
    for (x, y) in a.net.params.iter().zip(b.net.params.iter()) {
        assert_eq!(x.value.data(), y.value.data());
    }
    cfg.seed += 1;
    let c = train(&cfg, &index, &bank, None).unwrap();
    assert_ne!(a.log, c.log);
}
