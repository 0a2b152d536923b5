//! Plain SGD with a step learning-rate schedule, divergence guard, metrics
//! logging and binary checkpoints.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamGroup, ParamStore, Tensor};
use crate::data::{batches, SampleSource, StreamState};
use crate::error::{Error, Result};
use crate::model::{Model, Task};

/// Stream of the seed's ChaCha8 generator used for weight initialization.
pub const INIT_STREAM: u64 = u64::MAX;
/// Stream used for dropout masks.
pub const DROPOUT_STREAM: u64 = u64::MAX - 1;

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DROPOUT_STREAM);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub lr_aln: f64,
    pub lr_clf: f64,
    pub lr_drop_at: u64,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub task: Task,
    /// A metrics row is recorded every `log_every` iterations and at the last.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch: 64,
            lr_aln: 1e-4,
            lr_clf: 1e-2,
            lr_drop_at: 2500,
            lr_drop_factor: 0.1,
            seed: 0,
            task: Task::Classify,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch == 0 {
            return bad("train.batch must be at least 1".into());
        }
        for (name, lr) in [("lr_aln", self.lr_aln), ("lr_clf", self.lr_clf)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("train.{name} must be a finite non-negative number, got {lr}"));
            }
        }
        if !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0) {
            return bad(format!("train.lr_drop_factor must be positive, got {}", self.lr_drop_factor));
        }
        if self.lr_drop_at > self.iterations {
            return bad(format!(
                "train.lr_drop_at ({}) exceeds train.iterations ({})",
                self.lr_drop_at, self.iterations
            ));
        }
        if self.log_every == 0 {
            return bad("train.log_every must be at least 1".into());
        }
        Ok(())
    }

    /// `(lr_aln, lr_clf)` in effect at zero-based `iteration`.
    pub fn lr_at(&self, iteration: u64) -> (f64, f64) {
        if iteration >= self.lr_drop_at {
            (self.lr_aln * self.lr_drop_factor, self.lr_clf * self.lr_drop_factor)
        } else {
            (self.lr_aln, self.lr_clf)
        }
    }
}

/// `w -= lr * g` for one tensor.
pub fn sgd_update(weights: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if weights.len() != grads.len() {
        return Err(Error::Usage(format!(
            "sgd_update: {} weights but {} gradients",
            weights.len(),
            grads.len()
        )));
    }
    for (w, g) in weights.iter_mut().zip(grads) {
        *w -= lr * g;
    }
    Ok(())
}

/// One SGD step over every parameter with its group's rate, then zeroes
/// the gradients.
pub fn sgd_step(store: &mut ParamStore, lr_aln: f64, lr_clf: f64) -> Result<()> {
    for e in store.entries_mut() {
        let lr = match e.group {
            ParamGroup::Alignment => lr_aln,
            ParamGroup::Classifier => lr_clf,
        };
        if let Some(g) = e.tensor.grad().map(<[f64]>::to_vec) {
            sgd_update(e.tensor.data_mut(), &g, lr)?;
        }
    }
    store.zero_grads();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: u64,
    pub loss: f64,
    pub lr_aln: f64,
    pub lr_clf: f64,
    pub wall_ms: u128,
}

pub const METRICS_HEADER: &str = "iteration,loss,lr_aln,lr_clf";
pub const TIMING_HEADER: &str = "iteration,wall_ms";

impl MetricRow {
    /// The deterministic part of the row; wall time is logged separately.
    pub fn metrics_line(&self) -> String {
        format!("{},{:e},{:e},{:e}", self.iteration, self.loss, self.lr_aln, self.lr_clf)
    }

    pub fn timing_line(&self) -> String {
        format!("{},{}", self.iteration, self.wall_ms)
    }
}

/// Append-only `metrics.csv` and `timing.csv` in a run directory.
pub struct MetricsLog {
    metrics: File,
    timing: File,
}

impl MetricsLog {
    pub fn open(dir: &Path) -> Result<MetricsLog> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<File> {
            let path = dir.join(name);
            let fresh = !path.exists() || std::fs::metadata(&path)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh {
                writeln!(f, "{header}")?;
            }
            Ok(f)
        };
        Ok(MetricsLog {
            metrics: open("metrics.csv", METRICS_HEADER)?,
            timing: open("timing.csv", TIMING_HEADER)?,
        })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.metrics, "{}", row.metrics_line())?;
        writeln!(self.timing, "{}", row.timing_line())?;
        Ok(())
    }
}

/// Where [`train`] writes as it goes.
#[derive(Default)]
pub struct TrainOptions {
    pub config_hash: [u8; 32],
    /// Receives metrics rows and the diagnostic checkpoint on divergence.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of iteration 0.
    pub resume: Option<Checkpoint>,
}

pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

/// Runs `cfg.iterations` SGD steps on batches streamed from `source`.
pub fn train(model: &mut Model, source: &SampleSource, cfg: &TrainConfig, opts: TrainOptions) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.task == Task::Classify && model.classifier.is_none() {
        return Err(Error::Usage("the classification task needs a classifier".into()));
    }
    let mut stream = batches(source, cfg.batch, true, cfg.seed)?;
    let mut drop_rng = dropout_rng(cfg.seed);
    let mut start = 0;
    if let Some(ck) = &opts.resume {
        ck.restore_into(&mut model.store)?;
        stream.restore(ck.stream);
        drop_rng.set_word_pos(ck.dropout_word_pos);
        start = ck.iteration;
    }
    let mut log = opts.out_dir.as_deref().map(MetricsLog::open).transpose()?;
    let mut rows = Vec::new();
    let clock = Instant::now();
    model.store.zero_grads();

    for it in start..cfg.iterations {
        let batch = stream.next_batch()?;
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, cfg.task, true, &mut drop_rng)?;
        let value = g.data(loss)[0];
        if !value.is_finite() {
            let snapshot = Checkpoint::capture(&model.store, it, cfg.seed, stream.state(), drop_rng.get_word_pos(), opts.config_hash);
            let path = match &opts.out_dir {
                Some(dir) => {
                    let p = dir.join("diverged.ckpt");
                    snapshot.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            return Err(Error::Divergence {
                iteration: it,
                loss: value,
                checkpoint: path,
            });
        }
        g.backward(loss)?;
        model.store.accumulate_grads(&g);
        let (lr_aln, lr_clf) = cfg.lr_at(it);
        sgd_step(&mut model.store, lr_aln, lr_clf)?;

        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let row = MetricRow {
                iteration: it,
                loss: value,
                lr_aln,
                lr_clf,
                wall_ms: clock.elapsed().as_millis(),
            };
            log::debug!("iteration {it} loss {value:.6}");
            if let Some(l) = log.as_mut() {
                l.append(&row)?;
            }
            rows.push(row);
        }
    }

    let end = cfg.iterations.max(start);
    Ok(TrainReport {
        checkpoint: Checkpoint::capture(&model.store, end, cfg.seed, stream.state(), drop_rng.get_word_pos(), opts.config_hash),
        metrics: rows,
    })
}

const MAGIC: &[u8; 8] = b"DSTNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus everything needed to resume a run bitwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub stream: StreamState,
    pub dropout_word_pos: u128,
    pub config_hash: [u8; 32],
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        iteration: u64,
        seed: u64,
        stream: StreamState,
        dropout_word_pos: u128,
        config_hash: [u8; 32],
    ) -> Checkpoint {
        let mut params = ParamStore::new();
        for e in store.entries() {
            let t = Tensor::new(e.tensor.shape().to_vec(), e.tensor.data().to_vec()).expect("shape matches");
            params.add(e.name.clone(), e.group, t);
        }
        Checkpoint {
            iteration,
            seed,
            stream,
            dropout_word_pos,
            config_hash,
            params,
        }
    }

    /// Overwrites the values in `store`; names and shapes must match.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        store.copy_values_from(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.stream.epoch.to_le_bytes());
        out.extend_from_slice(&(self.stream.position as u64).to_le_bytes());
        out.extend_from_slice(&self.stream.perturb_word_pos.to_le_bytes());
        out.extend_from_slice(&self.dropout_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for e in self.params.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.group.code());
            out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        if bytes.len() < 32 {
            return r.fail("truncated checkpoint");
        }
        let body_end = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(Error::Format {
                offset: body_end as u64,
                msg: "checksum mismatch (truncated or corrupt checkpoint)".into(),
            });
        }
        let mut r = Reader {
            bytes: &bytes[..body_end],
            pos: r.pos,
        };
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let stream = StreamState {
            epoch: r.u64()?,
            position: r.u64()? as usize,
            perturb_word_pos: r.u128()?,
        };
        let dropout_word_pos = r.u128()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format {
                    offset: at as u64,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let at = r.pos;
            let group = ParamGroup::from_code(r.take(1)?[0]).ok_or_else(|| Error::Format {
                offset: at as u64,
                msg: "unknown parameter group".into(),
            })?;
            let ndims = r.u32()? as usize;
            let shape = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.add(name, group, Tensor::new(shape, data)?);
        }
        if r.pos != r.bytes.len() {
            return r.fail("trailing bytes before checksum");
        }
        Ok(Checkpoint {
            iteration,
            seed,
            stream,
            dropout_word_pos,
            config_hash,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// A loaded checkpoint and the warning raised if it was written under a
/// different configuration.
pub struct LoadedCheckpoint {
    pub checkpoint: Checkpoint,
    pub warning: Option<String>,
}

pub fn load_checkpoint(path: &Path, expected_hash: Option<&[u8; 32]>) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    let warning = expected_hash.filter(|h| **h != checkpoint.config_hash).map(|h| {
        format!(
            "checkpoint {} was written under config {}, current config is {}",
            path.display(),
            hex(&checkpoint.config_hash),
            hex(h)
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(LoadedCheckpoint { checkpoint, warning })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: &str) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_values() {
        let mut w = [1.0];
        sgd_update(&mut w, &[2.0], 0.1).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
        let mut w = [3.0, -1.0];
        sgd_update(&mut w, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(w, [3.0, -1.0]);
        assert!(matches!(sgd_update(&mut w, &[1.0], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn sgd_step_uses_group_rates_and_zeroes() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Alignment, Tensor::from_vec(vec![1.0]));
        let c = store.add("c", ParamGroup::Classifier, Tensor::from_vec(vec![1.0]));
        store.get_mut(a).accumulate_grad(&[1.0]);
        store.get_mut(c).accumulate_grad(&[1.0]);
        sgd_step(&mut store, 0.25, 0.5).unwrap();
        assert_eq!(store.get(a).data(), &[0.75]);
        assert_eq!(store.get(c).data(), &[0.5]);
        assert!(store.get(a).grad().is_none_or(|g| g == [0.0]));
    }

    #[test]
    fn half_steps_differ_from_full_step() {
        // L = w^4 / 4, dL/dw = w^3.
        let step = |w: f64, lr: f64| w - lr * w.powi(3);
        let full = step(1.0, 0.2);
        let halves = step(step(1.0, 0.1), 0.1);
        assert_ne!(full, halves);
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig {
            iterations: 10,
            lr_drop_at: 4,
            lr_aln: 1e-4,
            lr_clf: 1e-2,
            lr_drop_factor: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(3), (1e-4, 1e-2));
        assert_eq!(cfg.lr_at(4), (1e-4 * 0.1, 1e-2 * 0.1));
        assert_eq!(cfg.lr_at(9), (1e-4 * 0.1, 1e-2 * 0.1));
        assert!(TrainConfig { lr_drop_at: 11, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr_aln: -1.0, ..cfg }.validate().is_err());
    }

    fn sample_checkpoint() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("w", ParamGroup::Alignment, Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap());
        store.add("b", ParamGroup::Classifier, Tensor::from_vec(vec![0.1]));
        let stream = StreamState {
            epoch: 3,
            position: 17,
            perturb_word_pos: 123_456_789_012,
        };
        Checkpoint::capture(&store, 42, 7, stream, 99, [5; 32])
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ck = sample_checkpoint();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], b"DSTNCKPT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[60] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format { .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn hash_mismatch_warns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample_checkpoint().save(&path).unwrap();
        assert!(load_checkpoint(&path, Some(&[5; 32])).unwrap().warning.is_none());
        assert!(load_checkpoint(&path, None).unwrap().warning.is_none());
        let w = load_checkpoint(&path, Some(&[6; 32])).unwrap().warning.unwrap();
        assert!(w.contains("0505"));
        assert!(matches!(load_checkpoint(&dir.path().join("missing"), None), Err(Error::Data(_))));
    }
}
