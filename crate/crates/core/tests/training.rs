use destnet::autodiff::{Graph, Tensor};
use destnet::data::{batches, Batch, Dataset, PerturbConfig, SampleSource};
use destnet::fusion::FusionMode;
use destnet::model::{Model, ModelSpec, Task};
use destnet::netbuilder::parse_arch;
use destnet::stacks::{StackConfig, StackKind};
use destnet::training::{init_rng, load_checkpoint, train, Checkpoint, TrainConfig, TrainOptions};
use destnet::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn digits(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 144);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 3;
        let cx = 3.0 + 3.0 * label as f64 + rng.random_range(-0.5..0.5);
        for y in 0..12 {
            for x in 0..12 {
                let d = (x as f64 - cx).powi(2) + (y as f64 - 6.0).powi(2);
                data.push((-d / 4.0).exp());
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 1, 12, 12], data).unwrap(), labels, "blobs").unwrap()
}

fn source() -> SampleSource {
    SampleSource::OnTheFly {
        dataset: digits(40, 1),
        cfg: PerturbConfig::new(0.1, 12, true).unwrap(),
    }
}

fn spec(kind: StackKind, task: Task) -> ModelSpec {
    ModelSpec {
        stack: Some(StackConfig {
            kind,
            levels: 2,
            arch: parse_arch("conv3-3 | P | FC(8)").unwrap(),
            fusion: FusionMode::ExpansionContraction,
            kf: 4,
            keep_prob: 0.9,
        }),
        classifier: (task == Task::Classify).then(|| parse_arch("FC(3)").unwrap()),
        channels: 1,
        raster: (12, 12),
    }
}

fn cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        iterations,
        batch: 8,
        lr_aln: 1e-3,
        lr_clf: 1e-2,
        lr_drop_at: iterations / 2,
        lr_drop_factor: 0.1,
        seed: 4,
        task: Task::Classify,
        log_every: 1,
    }
}

fn model(kind: StackKind, task: Task) -> Model {
    Model::build(&spec(kind, task), &mut init_rng(4)).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut m = model(StackKind::Destnet, Task::Classify);
    let before = m.store.clone();
    let c = TrainConfig {
        lr_aln: 0.0,
        lr_clf: 0.0,
        ..cfg(6)
    };
    train(&mut m, &source(), &c, TrainOptions::default()).unwrap();
    for (a, b) in m.store.entries().iter().zip(before.entries()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn fifty_iterations_are_bitwise_reproducible() {
    let run = || {
        let mut m = model(StackKind::Destnet, Task::Classify);
        let r = train(&mut m, &source(), &cfg(50), TrainOptions::default()).unwrap();
        (r.metrics.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>(), m.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.len(), 50);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

#[test]
fn frozen_batch_loss_decreases_with_small_steps() {
    for (kind, task) in [(StackKind::Cstn, Task::Classify), (StackKind::Icstn, Task::Corners)] {
        let mut m = model(kind, task);
        // Non-zero heads so alignment gradients are active from the start.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for e in m.store.entries_mut() {
            if e.name.contains("l2.fc") {
                for v in e.tensor.data_mut() {
                    *v = rng.random_range(-0.01..0.01);
                }
            }
        }
        let src = source();
        let batch: Batch = batches(&src, 16, false, 2).unwrap().next_batch().unwrap();
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let mut g = Graph::new();
            let mut drop = ChaCha8Rng::seed_from_u64(0);
            let loss = m.loss(&mut g, &batch, task, false, &mut drop).unwrap();
            let value = g.data(loss)[0];
            assert!(value < last, "{kind:?} step {step}: {value} >= {last}");
            last = value;
            g.backward(loss).unwrap();
            m.store.accumulate_grads(&g);
            destnet::training::sgd_step(&mut m.store, 1e-5, 1e-5).unwrap();
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_forward_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(StackKind::Destnet, Task::Classify);
    let r = train(&mut m, &source(), &cfg(5), TrainOptions::default()).unwrap();
    let path = dir.path().join("m.ckpt");
    r.checkpoint.save(&path).unwrap();
    let images = batches(&source(), 6, false, 9).unwrap().next_batch().unwrap().images;
    let before = m.logits(&images).unwrap();
    let mut fresh = model(StackKind::Destnet, Task::Classify);
    load_checkpoint(&path, None).unwrap().checkpoint.restore_into(&mut fresh.store).unwrap();
    let after = fresh.logits(&images).unwrap();
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut full = model(StackKind::Destnet, Task::Classify);
    let c = cfg(12);
    let whole = train(&mut full, &source(), &c, TrainOptions::default()).unwrap();

    let mut part = model(StackKind::Destnet, Task::Classify);
    let first = train(
        &mut part,
        &source(),
        &TrainConfig { iterations: 7, ..c.clone() },
        TrainOptions::default(),
    )
    .unwrap();
    // Round-trip the checkpoint through bytes as a restart would.
    let ck = Checkpoint::from_bytes(&first.checkpoint.to_bytes()).unwrap();
    let mut resumed = model(StackKind::Destnet, Task::Classify);
    let rest = train(
        &mut resumed,
        &source(),
        &c,
        TrainOptions {
            resume: Some(ck),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.store, full.store);
    let tail: Vec<_> = whole.metrics[7..].to_vec();
    assert_eq!(
        tail.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>(),
        rest.metrics.iter().map(|m| m.loss.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn metrics_files_are_written_and_deterministic() {
    let read = |seed_dir: &std::path::Path| {
        let mut m = model(StackKind::Cstn, Task::Classify);
        train(
            &mut m,
            &source(),
            &cfg(8),
            TrainOptions {
                out_dir: Some(seed_dir.to_path_buf()),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        std::fs::read_to_string(seed_dir.join("metrics.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = read(a.path());
    assert_eq!(ma, read(b.path()));
    assert!(ma.starts_with("iteration,loss,lr_aln,lr_clf\n"));
    assert_eq!(ma.lines().count(), 9);
    assert!(a.path().join("timing.csv").exists());
}

#[test]
fn divergence_writes_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    // Two stacked dense layers overflow once both weights are huge.
    let mut deep = spec(StackKind::Cstn, Task::Classify);
    deep.classifier = Some(parse_arch("FC(6) | FC(3)").unwrap());
    let mut m = Model::build(&deep, &mut init_rng(4)).unwrap();
    let c = TrainConfig {
        lr_clf: 1e300,
        ..cfg(30)
    };
    let err = train(
        &mut m,
        &source(),
        &c,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        },
    )
    .err()
    .expect("training must diverge");
    match err {
        Error::Divergence { checkpoint, loss, .. } => {
            assert!(!loss.is_finite());
            let p = checkpoint.expect("diagnostic checkpoint path");
            assert!(load_checkpoint(&p, None).is_ok());
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn classify_without_classifier_is_a_usage_error() {
    let mut m = model(StackKind::Cstn, Task::Corners);
    let err = train(&mut m, &source(), &cfg(2), TrainOptions::default());
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn corner_training_reduces_corner_loss() {
    let mut m = model(StackKind::Destnet, Task::Corners);
    let c = TrainConfig {
        task: Task::Corners,
        lr_aln: 1e-2,
        lr_drop_at: 200,
        ..cfg(200)
    };
    let r = train(&mut m, &source(), &c, TrainOptions::default()).unwrap();
    let head: f64 = r.metrics[..20].iter().map(|m| m.loss).sum();
    let tail: f64 = r.metrics[180..].iter().map(|m| m.loss).sum();
    assert!(tail < head, "{head} -> {tail}");
}
