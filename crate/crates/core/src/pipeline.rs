//! Run configuration and the end-to-end stages: data generation, EDN
//! training, coarse caching, ERN training, completion, evaluation and
//! rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::denoiser::{Edn, Ern, NetworkConfig};
use crate::diffusion::{fast_sample, make_schedule, training_loss, ConditionedEdn, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::event::{
    denormalize, normalize, normalize_with_anchor, slice_stream, EventCloud, RawEvent,
    RawEventSlice, SensorGeometry, TimeAnchor,
};
use crate::geometry::CuboidSpec;
use crate::io::{read_events, read_store, write_evcl, write_store};
use crate::metrics::{chamfer, emd};
use crate::nn::{AdamConfig, AdamState, Grads, ParamStore, Tape};
use crate::sim::{synthetic_pairs, CaptureSpec, DatasetSpec, TrainingPair};

/// Everything a run needs, readable from and writable to a flat
/// `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,

    pub sensor_width: u16,
    pub sensor_height: u16,
    /// Length of each simulated scene in µs.
    pub scene_duration: i64,
    pub threshold: f64,
    pub refractory: i64,
    pub frame_dt: i64,
    /// Total synthetic slices, of which the last `test_slices` are held out.
    pub slices: usize,
    pub test_slices: usize,

    pub n_dense: usize,
    pub n_sparse: usize,

    pub levels: usize,
    pub widths: Vec<usize>,
    /// `None` halves the point count at every level.
    pub sa_points: Option<Vec<usize>>,
    pub cond_sa_points: Option<Vec<usize>>,
    pub cuboid_r: Vec<f64>,
    pub cuboid_t_scale: f64,
    pub max_k: usize,
    pub step_embed_dim: usize,
    pub use_ball_query: bool,

    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub fast_steps: usize,

    pub epochs_edn: usize,
    pub epochs_ern: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            sensor_width: 34,
            sensor_height: 34,
            scene_duration: 60_000,
            threshold: 0.2,
            refractory: 100,
            frame_dt: 500,
            slices: 2000,
            test_slices: 200,
            n_dense: 256,
            n_sparse: 64,
            levels: 3,
            widths: vec![32, 64, 128],
            sa_points: None,
            cond_sa_points: None,
            cuboid_r: vec![0.15, 0.3, 0.6],
            cuboid_t_scale: 2.0,
            max_k: 16,
            step_embed_dim: 64,
            use_ball_query: false,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            fast_steps: 27,
            epochs_edn: 120,
            epochs_ern: 30,
            lr: 2e-4,
            batch_size: 16,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Desk-scale preset: narrower networks and 20/10 epochs.
    pub fn toy() -> Self {
        Self {
            widths: vec![16, 32, 64],
            max_k: 8,
            step_embed_dim: 32,
            epochs_edn: 20,
            epochs_ern: 10,
            lr: 1e-3,
            ..Self::default()
        }
    }

    fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" | "default" => Some(Self::default()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    /// Parses a config file. A `preset` key picks the starting values
    /// (`paper` or `toy`); every other key overrides one field.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got `{line}`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if entries.iter().any(|(_, key, _): &(usize, &str, &str)| *key == k) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            entries.push((i + 1, k, v));
        }
        let mut cfg = Self::default();
        if let Some(&(line, _, name)) = entries.iter().find(|e| e.1 == "preset") {
            cfg = Self::preset(name)
                .ok_or_else(|| Error::Config(format!("line {line}: unknown preset `{name}`")))?;
        }
        for (line, k, v) in entries {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value `{v}` for `{key}`"))
        }
        fn list<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            parse_list(v).ok_or_else(|| format!("bad list `{v}` for `{key}`"))
        }
        fn auto_list(key: &str, v: &str) -> std::result::Result<Option<Vec<usize>>, String> {
            if v == "auto" {
                Ok(None)
            } else {
                list(key, v).map(Some)
            }
        }
        let v = value;
        match key {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "sensor_width" => self.sensor_width = num(key, v)?,
            "sensor_height" => self.sensor_height = num(key, v)?,
            "scene_duration" => self.scene_duration = num(key, v)?,
            "threshold" => self.threshold = num(key, v)?,
            "refractory" => self.refractory = num(key, v)?,
            "frame_dt" => self.frame_dt = num(key, v)?,
            "slices" => self.slices = num(key, v)?,
            "test_slices" => self.test_slices = num(key, v)?,
            "n_dense" => self.n_dense = num(key, v)?,
            "n_sparse" => self.n_sparse = num(key, v)?,
            "levels" => self.levels = num(key, v)?,
            "widths" => self.widths = list(key, v)?,
            "sa_points" => self.sa_points = auto_list(key, v)?,
            "cond_sa_points" => self.cond_sa_points = auto_list(key, v)?,
            "cuboid_r" => self.cuboid_r = list(key, v)?,
            "cuboid_t_scale" => self.cuboid_t_scale = num(key, v)?,
            "max_k" => self.max_k = num(key, v)?,
            "step_embed_dim" => self.step_embed_dim = num(key, v)?,
            "use_ball_query" => self.use_ball_query = num(key, v)?,
            "diffusion_steps" => self.diffusion_steps = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "fast_steps" => self.fast_steps = num(key, v)?,
            "epochs_edn" => self.epochs_edn = num(key, v)?,
            "epochs_ern" => self.epochs_ern = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// The full config as `key = value` lines; [`RunConfig::parse`] reads it
    /// back unchanged.
    pub fn to_text(&self) -> String {
        let auto = |v: &Option<Vec<usize>>| v.as_ref().map_or_else(|| "auto".to_owned(), |v| join(v));
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("threads", self.threads.to_string());
        put("sensor_width", self.sensor_width.to_string());
        put("sensor_height", self.sensor_height.to_string());
        put("scene_duration", self.scene_duration.to_string());
        put("threshold", self.threshold.to_string());
        put("refractory", self.refractory.to_string());
        put("frame_dt", self.frame_dt.to_string());
        put("slices", self.slices.to_string());
        put("test_slices", self.test_slices.to_string());
        put("n_dense", self.n_dense.to_string());
        put("n_sparse", self.n_sparse.to_string());
        put("levels", self.levels.to_string());
        put("widths", join(&self.widths));
        put("sa_points", auto(&self.sa_points));
        put("cond_sa_points", auto(&self.cond_sa_points));
        put("cuboid_r", join(&self.cuboid_r));
        put("cuboid_t_scale", self.cuboid_t_scale.to_string());
        put("max_k", self.max_k.to_string());
        put("step_embed_dim", self.step_embed_dim.to_string());
        put("use_ball_query", self.use_ball_query.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_start", self.beta_start.to_string());
        put("beta_end", self.beta_end.to_string());
        put("fast_steps", self.fast_steps.to_string());
        put("epochs_edn", self.epochs_edn.to_string());
        put("epochs_ern", self.epochs_ern.to_string());
        put("lr", self.lr.to_string());
        put("batch_size", self.batch_size.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let counts = [
            ("slices", self.slices),
            ("test_slices", self.test_slices),
            ("n_dense", self.n_dense),
            ("n_sparse", self.n_sparse),
            ("levels", self.levels),
            ("max_k", self.max_k),
            ("diffusion_steps", self.diffusion_steps),
            ("fast_steps", self.fast_steps),
            ("epochs_edn", self.epochs_edn),
            ("epochs_ern", self.epochs_ern),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v < 1 {
                return bad(format!("`{name}` must be at least 1"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("`lr` must be positive, got {}", self.lr));
        }
        if self.n_sparse >= self.n_dense {
            return bad(format!("n_sparse ({}) must be below n_dense ({})", self.n_sparse, self.n_dense));
        }
        if self.test_slices >= self.slices {
            return bad(format!("test_slices ({}) must be below slices ({})", self.test_slices, self.slices));
        }
        if self.fast_steps > self.diffusion_steps {
            return bad(format!("fast_steps ({}) exceeds diffusion_steps", self.fast_steps));
        }
        if self.scene_duration < 1 {
            return bad("`scene_duration` must be positive".into());
        }
        if self.cuboid_r.len() != self.levels {
            return bad(format!("`cuboid_r` needs {} entries", self.levels));
        }
        let cfg_err = |e: Error| Error::Config(e.to_string());
        SensorGeometry::new(self.sensor_width, self.sensor_height).map_err(cfg_err)?;
        self.capture().validate().map_err(cfg_err)?;
        self.network().validate().map_err(cfg_err)?;
        self.schedule().map_err(cfg_err)?;
        Ok(())
    }

    pub fn geometry(&self) -> Result<SensorGeometry> {
        SensorGeometry::new(self.sensor_width, self.sensor_height)
    }

    pub fn capture(&self) -> CaptureSpec {
        CaptureSpec {
            threshold: self.threshold,
            refractory: self.refractory,
            frame_dt: self.frame_dt,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        let mut net = NetworkConfig::new(self.n_dense, self.n_sparse);
        let halving = |n: usize| (1..=self.levels).map(|l| (n >> l).max(1)).collect();
        net.levels = self.levels;
        net.widths = self.widths.clone();
        net.sa_points = self.sa_points.clone().unwrap_or_else(|| halving(self.n_dense));
        net.cond_sa_points = self.cond_sa_points.clone().unwrap_or_else(|| halving(self.n_sparse));
        net.cuboids = self
            .cuboid_r
            .iter()
            .map(|&r| CuboidSpec {
                r,
                t_scale: self.cuboid_t_scale,
                max_k: self.max_k,
            })
            .collect();
        net.step_embed_dim = self.step_embed_dim;
        net.use_ball_query = self.use_ball_query;
        net
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

// Independent random streams, one per purpose.
const STREAM_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_SAMPLE: u64 = 5;
const STREAM_CACHE: u64 = 6;
const STREAM_EVAL: u64 = 7;
const STREAM_COMPLETE: u64 = 8;

fn stream_seed(seed: u64, purpose: u64) -> u64 {
    seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose));
    rng.set_stream(index);
    rng
}

/// A line-oriented `key=value` log sink.
pub type Log<'a> = &'a mut dyn FnMut(&str);

/// Simulates the training and held-out pairs. The two splits come from
/// disjoint scenes.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>)> {
    cfg.validate()?;
    let spec = DatasetSpec {
        geometry: cfg.geometry()?,
        duration: cfg.scene_duration,
        capture: cfg.capture(),
        n_dense: cfg.n_dense,
        n_sparse: cfg.n_sparse,
    };
    let train = synthetic_pairs(&spec, cfg.slices - cfg.test_slices, stream_seed(cfg.seed, STREAM_DATA))?;
    let test = synthetic_pairs(&spec, cfg.test_slices, stream_seed(cfg.seed, STREAM_TEST_DATA))?;
    Ok((train, test))
}

/// Path of `<dir>/<split>.<kind>.evcl`.
pub fn split_path(dir: &Path, split: &str, kind: &str) -> PathBuf {
    dir.join(format!("{split}.{kind}.evcl"))
}

/// Writes a split as two sample stores, `dense` and `sparse`, keyed by
/// pair index.
pub fn write_pairs(dir: &Path, split: &str, pairs: &[TrainingPair], geometry: SensorGeometry) -> Result<()> {
    let to_raw = |c: &EventCloud, a: TimeAnchor| denormalize(c, geometry, a).into_events();
    let dense: Vec<(u64, Vec<RawEvent>)> =
        pairs.iter().enumerate().map(|(i, p)| (i as u64, to_raw(&p.dense, p.anchor))).collect();
    let sparse: Vec<(u64, Vec<RawEvent>)> =
        pairs.iter().enumerate().map(|(i, p)| (i as u64, to_raw(&p.sparse, p.anchor))).collect();
    write_store(&split_path(dir, split, "dense"), &dense, geometry)?;
    write_store(&split_path(dir, split, "sparse"), &sparse, geometry)
}

/// Reads a split written by [`write_pairs`]. Each sparse cloud is normalized
/// with the anchor of its dense slice.
pub fn read_pairs(dir: &Path, split: &str) -> Result<Vec<TrainingPair>> {
    let dense = read_store(&split_path(dir, split, "dense"))?;
    let sparse = read_store(&split_path(dir, split, "sparse"))?;
    if dense.len() != sparse.len() {
        return Err(Error::invalid(format!(
            "{split}: {} dense but {} sparse samples",
            dense.len(),
            sparse.len()
        )));
    }
    dense
        .into_iter()
        .zip(sparse)
        .map(|((id, d, g), (sid, s, _))| {
            if id != sid {
                return Err(Error::invalid(format!("{split}: sample ids {id} and {sid} differ")));
            }
            let slice = RawEventSlice::new(d, g)?;
            let (dense, anchor) = normalize(&slice);
            let sparse = normalize_with_anchor(&s, g, anchor);
            Ok(TrainingPair { sparse, dense, anchor })
        })
        .collect()
}

/// A trained network and its per-epoch mean losses.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub params: ParamStore,
    pub epoch_losses: Vec<f64>,
}

/// A fresh EDN with parameters drawn from the run seed.
pub fn init_edn(cfg: &RunConfig) -> Result<(Edn, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Edn::new(cfg.network(), &mut store, &mut stream_rng(cfg.seed, STREAM_INIT, 0))?;
    store.round_to_f32();
    Ok((model, store))
}

pub fn init_ern(cfg: &RunConfig) -> Result<(Ern, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Ern::new(cfg.network(), &mut store, &mut stream_rng(cfg.seed, STREAM_INIT, 1))?;
    store.round_to_f32();
    Ok((model, store))
}

pub fn load_edn(cfg: &RunConfig, path: &Path) -> Result<(Edn, ParamStore)> {
    let (model, mut store) = init_edn(cfg)?;
    store.load_into(path)?;
    Ok((model, store))
}

pub fn load_ern(cfg: &RunConfig, path: &Path) -> Result<(Ern, ParamStore)> {
    let (model, mut store) = init_ern(cfg)?;
    store.load_into(path)?;
    Ok((model, store))
}

/// Path of the config snapshot stored next to a checkpoint.
pub fn snapshot_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn save_checkpoint(params: &ParamStore, cfg: &RunConfig, path: &Path) -> Result<()> {
    params.save(path)?;
    fs::write(snapshot_path(path), cfg.to_text())?;
    Ok(())
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_))
}

/// Mini-batch Adam over `n` samples. Per-sample losses run in parallel and
/// their gradients are summed in sample order, so the result does not depend
/// on the thread count. On a non-finite loss or gradient the parameters are
/// reset to the end of the last completed epoch.
fn train_loop<F>(
    stage: &'static str,
    params: &mut ParamStore,
    cfg: &RunConfig,
    epochs: usize,
    n: usize,
    sample_loss: F,
    log: Log<'_>,
) -> Result<Vec<f64>>
where
    F: Fn(&ParamStore, usize, &mut ChaCha8Rng) -> Result<(f64, Grads)> + Sync,
{
    if n == 0 {
        return Err(Error::invalid(format!("{stage}: empty dataset")));
    }
    let mut adam = AdamState::new(params, cfg.adam());
    let mut last_good = params.clone();
    let mut losses = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=epochs {
        let start = Instant::now();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        let mut total = 0.0;
        let mut diverged = false;
        for batch in order.chunks(cfg.batch_size) {
            let current: &ParamStore = params;
            let results: Vec<Result<(f64, Grads)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng = stream_rng(cfg.seed, STREAM_SAMPLE, ((epoch as u64) << 32) | i as u64);
                    sample_loss(current, i, &mut rng)
                })
                .collect();
            let mut sum: Option<Grads> = None;
            for r in results {
                match r {
                    Ok((loss, g)) => {
                        total += loss;
                        match sum.as_mut() {
                            Some(s) => s.add_assign(&g),
                            None => sum = Some(g),
                        }
                    }
                    Err(e) if is_numeric(&e) => diverged = true,
                    Err(e) => return Err(e),
                }
            }
            if diverged {
                break;
            }
            let mut grads = sum.expect("batches are non-empty");
            grads.scale(1.0 / batch.len() as f64);
            match adam.step(params, &grads) {
                Ok(()) => params.round_to_f32(),
                Err(e) if is_numeric(&e) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let mean = total / n as f64;
        if diverged || !mean.is_finite() || params.iter().any(|(_, t)| !t.all_finite()) {
            log(&format!("stage={stage} epoch={epoch} event=divergence"));
            params.copy_from(&last_good)?;
            return Err(Error::Divergence { stage, epoch });
        }
        log(&format!(
            "stage={stage} epoch={epoch} loss={mean:.6} secs={:.1}",
            start.elapsed().as_secs_f64()
        ));
        losses.push(mean);
        last_good.copy_from(params)?;
    }
    Ok(losses)
}

/// Trains the coarse network on the denoising loss. With `out` set, the
/// checkpoint and a config snapshot are written there, including after a
/// divergence (holding the last good parameters).
pub fn train_edn(
    pairs: &[TrainingPair],
    cfg: &RunConfig,
    out: Option<&Path>,
    log: Log<'_>,
) -> Result<Trained<Edn>> {
    cfg.validate()?;
    let (model, mut params) = init_edn(cfg)?;
    let schedule = cfg.schedule()?;
    log(&format!(
        "stage=edn samples={} params={} epochs={}",
        pairs.len(),
        params.count(),
        cfg.epochs_edn
    ));
    let result = train_loop("edn", &mut params, cfg, cfg.epochs_edn, pairs.len(), |p, i, rng| {
        training_loss(&model, p, &pairs[i].dense, &pairs[i].sparse, &schedule, rng)
    }, log);
    if let Some(path) = out {
        if matches!(result, Ok(_) | Err(Error::Divergence { .. })) {
            save_checkpoint(&params, cfg, path)?;
        }
    }
    Ok(Trained {
        model,
        params,
        epoch_losses: result?,
    })
}

/// Snaps a normalized cloud onto the pixel and microsecond grid of its
/// anchor, as if it had been written out and read back.
pub fn quantize(cloud: &EventCloud, geometry: SensorGeometry, anchor: TimeAnchor) -> EventCloud {
    normalize_with_anchor(denormalize(cloud, geometry, anchor).events(), geometry, anchor)
}

fn coarse_sample(
    edn: &Edn,
    params: &ParamStore,
    sparse: &EventCloud,
    cfg: &RunConfig,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<EventCloud> {
    let mut model = ConditionedEdn::new(edn, params, sparse)?;
    fast_sample(&mut model, cfg.n_dense, schedule, cfg.fast_steps, rng)
}

/// Draws one coarse completion per pair with the fast sampler, quantized as
/// it will be stored.
pub fn cache_coarse(
    pairs: &[TrainingPair],
    edn: &Edn,
    params: &ParamStore,
    cfg: &RunConfig,
) -> Result<Vec<EventCloud>> {
    let schedule = cfg.schedule()?;
    let geometry = cfg.geometry()?;
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(cfg.seed, STREAM_CACHE, i as u64);
            let coarse = coarse_sample(edn, params, &p.sparse, cfg, &schedule, &mut rng)?;
            Ok(quantize(&coarse, geometry, p.anchor))
        })
        .collect()
}

/// Stores coarse clouds keyed by pair index.
pub fn write_coarse_cache(
    path: &Path,
    pairs: &[TrainingPair],
    coarse: &[EventCloud],
    geometry: SensorGeometry,
) -> Result<()> {
    if pairs.len() != coarse.len() {
        return Err(Error::invalid("one coarse cloud per pair is required"));
    }
    let samples: Vec<(u64, Vec<RawEvent>)> = pairs
        .iter()
        .zip(coarse)
        .enumerate()
        .map(|(i, (p, c))| (i as u64, denormalize(c, geometry, p.anchor).into_events()))
        .collect();
    write_store(path, &samples, geometry)
}

/// Reads a coarse cache and aligns it with `pairs`.
pub fn read_coarse_cache(path: &Path, pairs: &[TrainingPair]) -> Result<Vec<EventCloud>> {
    let mut by_id: Vec<Option<(Vec<RawEvent>, SensorGeometry)>> = vec![None; pairs.len()];
    for (id, events, g) in read_store(path)? {
        if let Some(slot) = by_id.get_mut(id as usize) {
            *slot = Some((events, g));
        }
    }
    let missing: Vec<String> = by_id
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| i.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "coarse cache is missing ids {}",
            missing.join(",")
        )));
    }
    by_id
        .into_iter()
        .zip(pairs)
        .map(|(s, p)| {
            let (events, g) = s.expect("checked above");
            Ok(normalize_with_anchor(&events, g, p.anchor))
        })
        .collect()
}

fn ern_loss(ern: &Ern, params: &ParamStore, pair: &TrainingPair, coarse: &EventCloud) -> Result<(f64, Grads)> {
    let mut tape = Tape::new(params);
    let cond = ern.encode_condition(&mut tape, &pair.sparse)?;
    let refined = ern.forward(&mut tape, coarse, &cond)?;
    let loss = tape.chamfer(refined, pair.dense.coords().to_vec())?;
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("refinement loss".into()));
    }
    let grads = tape.backward(loss).param_grads(&tape);
    Ok((value, grads))
}

/// Trains the refinement network on chamfer distance to the dense target.
/// The first reported loss (epoch 0) is measured before any update.
pub fn train_ern(
    pairs: &[TrainingPair],
    coarse: &[EventCloud],
    cfg: &RunConfig,
    out: Option<&Path>,
    log: Log<'_>,
) -> Result<Trained<Ern>> {
    cfg.validate()?;
    if pairs.len() != coarse.len() {
        return Err(Error::invalid(format!(
            "{} pairs but {} coarse clouds",
            pairs.len(),
            coarse.len()
        )));
    }
    let (model, mut params) = init_ern(cfg)?;
    let initial: Vec<f64> = pairs
        .par_iter()
        .zip(coarse)
        .map(|(p, c)| ern_loss(&model, &params, p, c).map(|r| r.0))
        .collect::<Result<_>>()?;
    let initial = initial.iter().sum::<f64>() / pairs.len().max(1) as f64;
    log(&format!(
        "stage=ern samples={} params={} epochs={}",
        pairs.len(),
        params.count(),
        cfg.epochs_ern
    ));
    log(&format!("stage=ern epoch=0 loss={initial:.6}"));
    let result = train_loop("ern", &mut params, cfg, cfg.epochs_ern, pairs.len(), |p, i, _| {
        ern_loss(&model, p, &pairs[i], &coarse[i])
    }, log);
    if let Some(path) = out {
        if matches!(result, Ok(_) | Err(Error::Divergence { .. })) {
            save_checkpoint(&params, cfg, path)?;
        }
    }
    let mut epoch_losses = vec![initial];
    epoch_losses.extend(result?);
    Ok(Trained {
        model,
        params,
        epoch_losses,
    })
}

/// Both trained networks.
#[derive(Debug, Clone)]
pub struct Models {
    pub edn: Edn,
    pub edn_params: ParamStore,
    pub ern: Ern,
    pub ern_params: ParamStore,
}

impl Models {
    pub fn load(cfg: &RunConfig, edn: &Path, ern: &Path) -> Result<Self> {
        let (edn, edn_params) = load_edn(cfg, edn)?;
        let (ern, ern_params) = load_ern(cfg, ern)?;
        Ok(Self {
            edn,
            edn_params,
            ern,
            ern_params,
        })
    }
}

/// Coarse and refined completions of one sparse cloud, both quantized to
/// the sensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub coarse: EventCloud,
    pub refined: EventCloud,
}

/// Completes one normalized sparse cloud.
pub fn complete_cloud(
    sparse: &EventCloud,
    anchor: TimeAnchor,
    geometry: SensorGeometry,
    models: &Models,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Completion> {
    let schedule = cfg.schedule()?;
    let coarse = coarse_sample(&models.edn, &models.edn_params, sparse, cfg, &schedule, rng)?;
    let coarse = quantize(&coarse, geometry, anchor);
    let cond = models.ern.condition_cache(&models.ern_params, sparse)?;
    let refined = models.ern.refine(&models.ern_params, &coarse, &cond)?;
    Ok(Completion {
        refined: quantize(&refined, geometry, anchor),
        coarse,
    })
}

/// Cuts `events` into `n_sparse`-event slices and completes each into
/// `n_dense` events spanning the same time range.
pub fn complete_events(
    events: &[RawEvent],
    geometry: SensorGeometry,
    models: &Models,
    cfg: &RunConfig,
) -> Result<Vec<RawEventSlice>> {
    let slices = slice_stream(events, geometry, cfg.n_sparse)?;
    if slices.is_empty() {
        return Err(Error::invalid(format!(
            "input holds no complete slice of {} events",
            cfg.n_sparse
        )));
    }
    slices
        .par_iter()
        .enumerate()
        .map(|(i, slice)| {
            let (cloud, anchor) = normalize(slice);
            let mut rng = stream_rng(cfg.seed, STREAM_COMPLETE, i as u64);
            let done = complete_cloud(&cloud, anchor, geometry, models, cfg, &mut rng)?;
            Ok(denormalize(&done.refined, geometry, anchor))
        })
        .collect()
}

/// Reads a sparse event file, completes it and writes the dense stream as
/// EVCL. Returns the number of slices completed.
pub fn complete_file(input: &Path, output: &Path, models: &Models, cfg: &RunConfig) -> Result<usize> {
    let (events, geometry) = read_events(input)?;
    let slices = complete_events(&events, geometry, models, cfg)?;
    let all: Vec<RawEvent> = slices.iter().flat_map(|s| s.events().iter().copied()).collect();
    write_evcl(output, &all, geometry)?;
    Ok(slices.len())
}

/// Per-pair metrics, already scaled: CD × 10³ and EMD × 10².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub id: usize,
    pub cd_coarse: f64,
    pub emd_coarse: f64,
    pub cd_refined: f64,
    pub emd_refined: f64,
}

pub const CD_SCALE: f64 = 1e3;
pub const EMD_SCALE: f64 = 1e2;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_cd_coarse(&self) -> f64 {
        self.mean(|r| r.cd_coarse)
    }

    pub fn mean_emd_coarse(&self) -> f64 {
        self.mean(|r| r.emd_coarse)
    }

    pub fn mean_cd(&self) -> f64 {
        self.mean(|r| r.cd_refined)
    }

    pub fn mean_emd(&self) -> f64 {
        self.mean(|r| r.emd_refined)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,cd_coarse_e3,emd_coarse_e2,cd_e3,emd_e2\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.id, r.cd_coarse, r.emd_coarse, r.cd_refined, r.emd_refined
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "samples={} cd_coarse_e3={:.4} emd_coarse_e2={:.4} cd_e3={:.4} emd_e2={:.4}",
            self.rows.len(),
            self.mean_cd_coarse(),
            self.mean_emd_coarse(),
            self.mean_cd(),
            self.mean_emd()
        )
    }
}

/// Scores one prediction against its target: `(CD × 10³, EMD × 10²)`.
pub fn score(pred: &EventCloud, target: &EventCloud) -> Result<(f64, f64)> {
    Ok((
        chamfer(pred.coords(), target.coords())? * CD_SCALE,
        emd(pred.coords(), target.coords())? * EMD_SCALE,
    ))
}

/// Completes every held-out pair and scores coarse and refined outputs
/// against the dense slice.
pub fn evaluate(pairs: &[TrainingPair], models: &Models, cfg: &RunConfig) -> Result<EvalReport> {
    let geometry = cfg.geometry()?;
    let rows = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(cfg.seed, STREAM_EVAL, i as u64);
            let done = complete_cloud(&p.sparse, p.anchor, geometry, models, cfg, &mut rng)?;
            let (cd_coarse, emd_coarse) = score(&done.coarse, &p.dense)?;
            let (cd_refined, emd_refined) = score(&done.refined, &p.dense)?;
            Ok(EvalRow {
                id: i,
                cd_coarse,
                emd_coarse,
                cd_refined,
                emd_refined,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { rows })
}

/// Accumulation image as a binary PPM: each pixel's signed polarity sum,
/// scaled by the largest magnitude, on a blue-gray-red scale. Empty pixels
/// are mid-gray.
pub fn render_ppm(events: &[RawEvent], geometry: SensorGeometry) -> Vec<u8> {
    let (w, h) = (usize::from(geometry.width), usize::from(geometry.height));
    let mut acc = vec![0i64; w * h];
    for e in events.iter().filter(|e| geometry.contains(e)) {
        acc[usize::from(e.y) * w + usize::from(e.x)] += if e.p > 0 { 1 } else { -1 };
    }
    let peak = acc.iter().map(|v| v.abs()).max().unwrap_or(0).max(1) as f64;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in &acc {
        let a = v as f64 / peak;
        let rgb = if a >= 0.0 {
            [128.0 + 127.0 * a, 128.0 - 88.0 * a, 128.0 - 128.0 * a]
        } else {
            let a = -a;
            [128.0 - 128.0 * a, 128.0 - 48.0 * a, 128.0 + 127.0 * a]
        };
        out.extend(rgb.map(|c| c.round() as u8));
    }
    out
}

pub fn render_file(input: &Path, output: &Path) -> Result<()> {
    let (events, geometry) = read_events(input)?;
    fs::write(output, render_ppm(&events, geometry))?;
    Ok(())
}

/// Slices a raw event file into `n`-event samples stored under their
/// index. Returns the slice count.
pub fn slice_file(input: &Path, output: &Path, n: usize) -> Result<usize> {
    let (events, geometry) = read_events(input)?;
    let slices = slice_stream(&events, geometry, n)?;
    let samples: Vec<(u64, Vec<RawEvent>)> = slices
        .into_iter()
        .enumerate()
        .map(|(i, s)| (i as u64, s.into_events()))
        .collect();
    write_store(output, &samples, geometry)?;
    Ok(samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{gaussian_points, random_polarity, training_loss_at};

    fn tiny() -> RunConfig {
        RunConfig {
            seed: 5,
            slices: 10,
            test_slices: 3,
            n_dense: 32,
            n_sparse: 8,
            levels: 2,
            widths: vec![8, 16],
            cuboid_r: vec![0.4, 0.8],
            max_k: 6,
            step_embed_dim: 8,
            diffusion_steps: 50,
            fast_steps: 5,
            epochs_edn: 2,
            epochs_ern: 2,
            lr: 1e-3,
            batch_size: 4,
            ..RunConfig::default()
        }
    }

    fn quiet() -> impl FnMut(&str) {
        |_: &str| {}
    }

    #[test]
    fn config_text_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::toy(), tiny()] {
            assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        let mut explicit = tiny();
        explicit.sa_points = Some(vec![12, 5]);
        assert_eq!(RunConfig::parse(&explicit.to_text()).unwrap(), explicit);
    }

    #[test]
    fn config_preset_and_overrides() {
        let cfg = RunConfig::parse("# toy run\nseed = 9\npreset = toy\nuse_ball_query = true\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs_edn, 20);
        assert_eq!(cfg.epochs_ern, 10);
        assert!(cfg.network().use_ball_query);
        let paper = RunConfig::default();
        assert_eq!((paper.epochs_edn, paper.epochs_ern, paper.lr, paper.fast_steps), (120, 30, 2e-4, 27));
    }

    #[test]
    fn config_errors() {
        for text in [
            "bogus = 1",
            "seed = x",
            "seed",
            "seed = 1\nseed = 2",
            "lr = 0",
            "lr = -1e-3",
            "batch_size = 0",
            "n_sparse = 300",
            "widths = 8,16",
            "preset = huge",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn network_follows_config() {
        let net = tiny().network();
        assert_eq!(net.sa_points, vec![16, 8]);
        assert_eq!(net.cond_sa_points, vec![4, 2]);
        assert_eq!(net.cuboids[1].r, 0.8);
        net.validate().unwrap();
    }

    #[test]
    fn render_examples() {
        let g = SensorGeometry::new(4, 3).unwrap();
        let img = render_ppm(&[], g);
        let header = b"P6\n4 3\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert!(img[header.len()..].iter().all(|&c| c == 128));

        let img = render_ppm(&[RawEvent::new(2, 1, 10, 1)], g);
        let px = &img[header.len()..];
        for i in 0..12 {
            let rgb = &px[3 * i..3 * i + 3];
            if i == 4 + 2 {
                assert!(rgb[0] > 200 && rgb[2] < 50, "{rgb:?}");
            } else {
                assert_eq!(rgb, &[128, 128, 128]);
            }
        }
        let evs = [RawEvent::new(0, 0, 1, 0), RawEvent::new(3, 2, 2, 1), RawEvent::new(3, 2, 3, 1)];
        assert_eq!(render_ppm(&evs, g), render_ppm(&evs, g));
        assert!(render_ppm(&evs, g)[header.len() + 2] > 160);
    }

    #[test]
    fn score_identity_and_report_arithmetic() {
        let c = EventCloud::new(vec![[0.1, 0.2, 0.3], [-0.5, 0.0, 0.9]], vec![1.0, -1.0]).unwrap();
        assert_eq!(score(&c, &c).unwrap(), (0.0, 0.0));
        let rows = (0..4)
            .map(|i| EvalRow {
                id: i,
                cd_coarse: i as f64,
                emd_coarse: 2.0 * i as f64,
                cd_refined: 0.5,
                emd_refined: i as f64 + 1.0,
            })
            .collect();
        let r = EvalReport { rows };
        assert_eq!(r.mean_cd_coarse(), 1.5);
        assert_eq!(r.mean_emd(), 2.5);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        let total: f64 = csv.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse::<f64>().unwrap()).sum();
        assert!((total / 4.0 - r.mean_emd()).abs() < 1e-12);
    }

    #[test]
    fn edn_smoke_and_determinism() {
        let cfg = RunConfig { epochs_edn: 1, ..tiny() };
        let (train, _) = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.edr");
        let b = dir.path().join("b.edr");
        let mut lines = Vec::new();
        let t = train_edn(&train[..1], &cfg, Some(&a), &mut |l: &str| lines.push(l.to_owned())).unwrap();
        assert_eq!(t.epoch_losses.len(), 1);
        assert!(lines.iter().any(|l| l.starts_with("stage=edn epoch=1 loss=")));
        assert!(a.exists());
        assert_eq!(RunConfig::load(&snapshot_path(&a)).unwrap(), cfg);
        train_edn(&train[..1], &cfg, Some(&b), &mut quiet()).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

        let (_, loaded) = load_edn(&cfg, &a).unwrap();
        assert_eq!(loaded, t.params);
    }

    #[test]
    fn edn_training_is_thread_count_independent() {
        let cfg = tiny();
        let (train, _) = generate_dataset(&cfg).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| train_edn(&train, &cfg, None, &mut quiet()).unwrap().params.to_bytes())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn frozen_batch_loss_decreases() {
        let cfg = RunConfig { slices: 6, test_slices: 2, ..RunConfig::toy() };
        let (train, _) = generate_dataset(&cfg).unwrap();
        let (model, mut params) = init_edn(&cfg).unwrap();
        let schedule = cfg.schedule().unwrap();
        let mut rng = stream_rng(1, 99, 0);
        let frozen: Vec<_> = train
            .iter()
            .map(|p| {
                (
                    rand::Rng::random_range(&mut rng, 1..=schedule.steps()),
                    gaussian_points(p.dense.len(), &mut rng),
                    random_polarity(p.dense.len(), &mut rng),
                )
            })
            .collect();
        let mut adam = AdamState::new(&params, cfg.adam());
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let mut total = 0.0;
            let mut sum = params.zeros_like();
            for (p, (t, eps, pol)) in train.iter().zip(&frozen) {
                let (l, g) = training_loss_at(&model, &params, &p.dense, &p.sparse, &schedule, *t, eps, pol).unwrap();
                total += l;
                sum.add_assign(&g);
            }
            assert!(total < prev, "loss went from {prev} to {total}");
            prev = total;
            sum.scale(1.0 / train.len() as f64);
            adam.step(&mut params, &sum).unwrap();
            params.round_to_f32();
        }
    }

    #[test]
    fn coarse_cache_and_ern() {
        let cfg = tiny();
        let (train, _) = generate_dataset(&cfg).unwrap();
        let edn = train_edn(&train, &cfg, None, &mut quiet()).unwrap();
        let coarse = cache_coarse(&train, &edn.model, &edn.params, &cfg).unwrap();
        assert_eq!(coarse.len(), train.len());
        for c in &coarse {
            assert_eq!(c.len(), cfg.n_dense);
            assert!(c.coords().iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
            assert!(c.polarity().iter().all(|p| p.abs() == 1.0));
        }
        assert_eq!(cache_coarse(&train, &edn.model, &edn.params, &cfg).unwrap(), coarse);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("coarse.evcl");
        let g = cfg.geometry().unwrap();
        write_coarse_cache(&path, &train, &coarse, g).unwrap();
        assert_eq!(read_coarse_cache(&path, &train).unwrap(), coarse);
        let first = fs::read(&path).unwrap();
        write_coarse_cache(&path, &train, &coarse, g).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);

        let more: Vec<_> = train.iter().chain(&train[..2]).cloned().collect();
        match read_coarse_cache(&path, &more) {
            Err(Error::InvalidArgument(m)) => assert!(m.contains("7,8"), "{m}"),
            other => panic!("{other:?}"),
        }

        let cfg = RunConfig { epochs_ern: 3, ..cfg };
        let ern = train_ern(&train, &coarse, &cfg, None, &mut quiet()).unwrap();
        let cd: f64 = train
            .iter()
            .zip(&coarse)
            .map(|(p, c)| chamfer(c.coords(), p.dense.coords()).unwrap())
            .sum::<f64>()
            / train.len() as f64;
        assert!((ern.epoch_losses[0] - cd).abs() < 1e-12);
        assert_eq!(ern.epoch_losses.len(), 4);
    }

    #[test]
    fn ern_smoke_on_one_sample() {
        let cfg = RunConfig { epochs_ern: 1, ..tiny() };
        let (train, _) = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ern.edr");
        let coarse = vec![train[1].dense.clone()];
        let t = train_ern(&train[..1], &coarse, &cfg, Some(&out), &mut quiet()).unwrap();
        assert_eq!(t.epoch_losses.len(), 2);
        assert!(out.exists());
        assert!(train_ern(&train[..2], &coarse, &cfg, None, &mut quiet()).is_err());
    }

    #[test]
    fn completion_contract() {
        let cfg = tiny();
        let (train, test) = generate_dataset(&cfg).unwrap();
        let edn = train_edn(&train, &cfg, None, &mut quiet()).unwrap();
        let (ern, ern_params) = init_ern(&cfg).unwrap();
        let models = Models {
            edn: edn.model,
            edn_params: edn.params,
            ern,
            ern_params,
        };
        let g = cfg.geometry().unwrap();
        let sparse: Vec<RawEvent> = test
            .iter()
            .flat_map(|p| denormalize(&p.sparse, g, p.anchor).into_events())
            .collect();
        let slices = complete_events(&sparse, g, &models, &cfg).unwrap();
        let inputs = slice_stream(&sparse, g, cfg.n_sparse).unwrap();
        assert_eq!(slices.len(), inputs.len());
        for (out, inp) in slices.iter().zip(&inputs) {
            assert_eq!(out.len(), cfg.n_dense);
            let a = inp.anchor();
            assert!(out.events().iter().all(|e| e.t >= a.t0 && e.t <= a.tn && g.contains(e)));
            assert!(out.events().windows(2).all(|w| w[0].sort_key() <= w[1].sort_key()));
        }
        assert_eq!(complete_events(&sparse, g, &models, &cfg).unwrap(), slices);
        assert!(complete_events(&sparse[..cfg.n_sparse - 1], g, &models, &cfg).is_err());

        let report = evaluate(&test, &models, &cfg).unwrap();
        assert_eq!(report.rows.len(), test.len());
        // An untrained refinement head leaves the coarse cloud in place.
        for r in &report.rows {
            assert_eq!(r.cd_coarse, r.cd_refined);
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let cfg = tiny();
        let (train, test) = generate_dataset(&cfg).unwrap();
        assert_eq!((train.len(), test.len()), (7, 3));
        let dir = tempfile::tempdir().unwrap();
        let g = cfg.geometry().unwrap();
        write_pairs(dir.path(), "train", &train, g).unwrap();
        let back = read_pairs(dir.path(), "train").unwrap();
        assert_eq!(back.len(), train.len());
        for (a, b) in back.iter().zip(&train) {
            assert_eq!(a.dense, b.dense);
            assert_eq!(a.anchor, b.anchor);
            let key = |c: &EventCloud| {
                let mut v: Vec<_> = c.coords().iter().zip(c.polarity()).map(|(c, p)| format!("{c:?}{p}")).collect();
                v.sort();
                v
            };
            assert_eq!(key(&a.sparse), key(&b.sparse));
        }
    }
}
