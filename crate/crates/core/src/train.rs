//! Unpaired adversarial training of the two generators and two discriminators.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Container, f64s_to_bytes};
use crate::error::{Error, Result};
use crate::grid::{avg_pool_f, Grid2D, ScaleFactor};
use crate::losses::{
    adv_generator_loss_grad, cycle_l1_grad, l_clinical_ssim_grad, l_downsample_grad,
    l_micro_ssim_grad, l_upsample_grad, least_squares_grad, GeneratorTerms, LossReport,
    LossWeights, DEFAULT_SSIM_EPS,
};
use crate::model::{
    d1_topology, d2_topology, g1_topology, g2_topology, DifferentiableMap, ModelSpec, Norm,
    HR_PATCH, LR_PATCH,
};
use crate::quality::SsimParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Single-hop downsample, upsample and SSIM terms.
    Modified,
    /// Classic two-generator L1 cycle term instead of the single-hop terms.
    OriginalCyclegan,
    /// Adversarial terms only.
    None,
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineMode::Modified => "modified",
            BaselineMode::OriginalCyclegan => "original_cyclegan",
            BaselineMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mix_ratio: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub pool_size: usize,
    pub ssim_eps: f64,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    /// Write a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub generator: ModelSpec,
    pub discriminator: ModelSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 16,
            mix_ratio: 0.25,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            pool_size: 50,
            ssim_eps: DEFAULT_SSIM_EPS,
            seed: 0,
            baseline_mode: BaselineMode::Modified,
            checkpoint_every: 10,
            weights: LossWeights::default(),
            generator: ModelSpec::default(),
            discriminator: ModelSpec {
                base_channels: 64,
                n_res_blocks: 0,
                norm: Norm::Instance,
                seed: 0,
                nearest_skip: false,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!("mix_ratio must lie in [0, 1], got {}", self.mix_ratio));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.ssim_eps > 0.0 && self.ssim_eps <= 1.0) {
            return bad(format!("ssim_eps must lie in (0, 1], got {}", self.ssim_eps));
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    /// Parses the TOML key-value form. Missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn replacements(&self) -> usize {
        replacement_count(self.batch_size, self.mix_ratio)
    }
}

pub fn replacement_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).floor() as usize
}

/// Clinical batch with some items replaced by downsampled micro patches.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub items: Vec<Grid2D>,
    /// For each item, the index of the micro patch it came from, if any.
    pub sources: Vec<Option<usize>>,
}

impl MixedBatch {
    pub fn replaced(&self) -> usize {
        self.sources.iter().filter(|s| s.is_some()).count()
    }
}

/// Replaces exactly `floor(ratio * N)` clinical items, at random positions,
/// with `avg_pool_f` of randomly chosen distinct micro patches.
pub fn mix_batch(
    clinical: &[Grid2D],
    micro: &[Grid2D],
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParameter(format!("mix ratio {ratio} outside [0, 1]")));
    }
    let n = clinical.len();
    let k = replacement_count(n, ratio);
    if micro.len() < k {
        return Err(Error::InvalidParameter(format!(
            "mixing {k} of {n} items needs at least {k} micro patches, got {}",
            micro.len()
        )));
    }
    let mut items = clinical.to_vec();
    let mut sources = vec![None; n];
    if k == 0 {
        return Ok(MixedBatch { items, sources });
    }
    let positions = sample_indices(rng, n, k);
    let picks = sample_indices(rng, micro.len(), k);
    for (pos, src) in positions.iter().zip(picks.iter()) {
        items[pos] = avg_pool_f(&micro[src], ScaleFactor::SR)?;
        sources[pos] = Some(src);
    }
    Ok(MixedBatch { items, sources })
}

/// History of generated images for discriminator updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    items: Vec<Grid2D>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            items: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Grid2D] {
        &self.items
    }

    /// Stores fresh fakes and returns the batch the discriminator sees. While
    /// filling, fakes pass through; once full, each fake is swapped with a
    /// stored one with probability 0.5. A stored slot is handed out at most
    /// once per call.
    pub fn query(&mut self, fakes: &[Grid2D], rng: &mut impl Rng) -> Vec<Grid2D> {
        if self.capacity == 0 {
            return fakes.to_vec();
        }
        let mut used = vec![false; self.capacity];
        let mut out = Vec::with_capacity(fakes.len());
        for f in fakes {
            if self.items.len() < self.capacity {
                used[self.items.len()] = true;
                self.items.push(f.clone());
                out.push(f.clone());
                continue;
            }
            let free: Vec<usize> = (0..self.capacity).filter(|&i| !used[i]).collect();
            if !free.is_empty() && rng.gen_bool(0.5) {
                let slot = free[rng.gen_range(0..free.len())];
                used[slot] = true;
                out.push(std::mem::replace(&mut self.items[slot], f.clone()));
            } else {
                out.push(f.clone());
            }
        }
        out
    }

    fn restore(capacity: usize, items: Vec<Grid2D>) -> Result<Self> {
        if items.len() > capacity {
            return Err(Error::Checkpoint(format!(
                "pool holds {} items but capacity is {capacity}",
                items.len()
            )));
        }
        Ok(ImagePool { capacity, items })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    fn save(&self, c: &mut Container, prefix: &str) {
        c.put_f64s(&format!("{prefix}adam.m"), &self.m);
        c.put_f64s(&format!("{prefix}adam.v"), &self.v);
        c.put_u64(&format!("{prefix}adam.t"), self.t);
    }

    fn load(&mut self, c: &Container, prefix: &str) -> Result<()> {
        let m = c.get_f64s(&format!("{prefix}adam.m"))?;
        let v = c.get_f64s(&format!("{prefix}adam.v"))?;
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint(format!("{prefix}optimizer size mismatch")));
        }
        self.m = m;
        self.v = v;
        self.t = c.get_u64(&format!("{prefix}adam.t"))?;
        Ok(())
    }
}

/// Everything a training run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g1: DifferentiableMap,
    pub g2: DifferentiableMap,
    pub d1: DifferentiableMap,
    pub d2: DifferentiableMap,
    opt: [Adam; 4],
    /// Fakes from G1, judged by D1.
    pub pool_hr: ImagePool,
    /// Fakes from G2, judged by D2.
    pub pool_lr: ImagePool,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: u64,
}

const MAPS: [&str; 4] = ["g1", "g2", "d1", "d2"];

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let g1 = DifferentiableMap::init(g1_topology(&config.generator)?, rng.gen())?;
        let g2 = DifferentiableMap::init(g2_topology(&config.generator)?, rng.gen())?;
        let d1 = DifferentiableMap::init(d1_topology(&config.discriminator)?, rng.gen())?;
        let d2 = DifferentiableMap::init(d2_topology(&config.discriminator)?, rng.gen())?;
        let adam = |m: &DifferentiableMap| {
            Adam::new(
                m.param_count(),
                config.learning_rate,
                config.adam_beta1,
                config.adam_beta2,
            )
        };
        let opt = [adam(&g1), adam(&g2), adam(&d1), adam(&d2)];
        Ok(TrainState {
            pool_hr: ImagePool::new(config.pool_size),
            pool_lr: ImagePool::new(config.pool_size),
            config,
            g1,
            g2,
            d1,
            d2,
            opt,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    fn maps(&self) -> [&DifferentiableMap; 4] {
        [&self.g1, &self.g2, &self.d1, &self.d2]
    }

    /// SHA-256 of each parameter vector, in g1, g2, d1, d2 order.
    pub fn param_hashes(&self) -> [String; 4] {
        self.maps().map(|m| sha256_hex(&f64s_to_bytes(m.params())))
    }

    pub fn optimizer(&self, i: usize) -> &Adam {
        &self.opt[i]
    }

    pub fn to_container(&self, history: &[HistoryRow]) -> Result<Container> {
        let mut c = Container::new();
        c.put_str("kind", "train_state");
        for (name, m) in MAPS.iter().zip(self.maps()) {
            for section in m.to_container()?.section_names() {
                if section == "kind" {
                    continue;
                }
                let inner = m.to_container()?;
                c.put(&format!("{name}.{section}"), inner.get(section)?.to_vec());
            }
        }
        for (name, o) in MAPS.iter().zip(&self.opt) {
            o.save(&mut c, &format!("{name}."));
        }
        c.put_u64("epoch", self.epoch as u64);
        c.put_u64("step", self.step);
        c.put("rng.seed", self.rng.get_seed().to_vec());
        c.put_u64("rng.stream", self.rng.get_stream());
        c.put("rng.word_pos", self.rng.get_word_pos().to_le_bytes().to_vec());
        for (name, pool) in [("pool_hr", &self.pool_hr), ("pool_lr", &self.pool_lr)] {
            c.put_u64(&format!("{name}.len"), pool.len() as u64);
            let flat: Vec<f64> = pool.items.iter().flat_map(|g| g.values().to_vec()).collect();
            c.put_f64s(&format!("{name}.data"), &flat);
        }
        c.put_str(
            "config",
            &serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        c.put_str("config_hash", &self.config.hash());
        c.put_str("history", &history_csv(history)?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<(Self, Vec<HistoryRow>)> {
        if c.get_str("kind")? != "train_state" {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let config: TrainConfig = serde_json::from_str(c.get_str("config")?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if config.hash() != c.get_str("config_hash")? {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let mut s = TrainState::new(config)?;
        s.g1 = DifferentiableMap::from_container(c, "g1.")?;
        s.g2 = DifferentiableMap::from_container(c, "g2.")?;
        s.d1 = DifferentiableMap::from_container(c, "d1.")?;
        s.d2 = DifferentiableMap::from_container(c, "d2.")?;
        for (name, o) in MAPS.iter().zip(s.opt.iter_mut()) {
            o.load(c, &format!("{name}."))?;
        }
        s.epoch = c.get_u64("epoch")? as usize;
        s.step = c.get_u64("step")?;
        let seed: [u8; 32] = c
            .get("rng.seed")?
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let word: [u8; 16] = c
            .get("rng.word_pos")?
            .try_into()
            .map_err(|_| Error::Checkpoint("rng position must be 16 bytes".into()))?;
        s.rng = ChaCha8Rng::from_seed(seed);
        s.rng.set_stream(c.get_u64("rng.stream")?);
        s.rng.set_word_pos(u128::from_le_bytes(word));
        for (name, side) in [("pool_hr", HR_PATCH), ("pool_lr", LR_PATCH)] {
            let n = c.get_u64(&format!("{name}.len"))? as usize;
            let flat = c.get_f64s(&format!("{name}.data"))?;
            if flat.len() != n * side * side {
                return Err(Error::Checkpoint(format!("{name} payload size mismatch")));
            }
            let items = flat
                .chunks(side * side)
                .map(|ch| Grid2D::new(side, side, ch.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let pool = ImagePool::restore(s.config.pool_size, items)?;
            if name == "pool_hr" {
                s.pool_hr = pool;
            } else {
                s.pool_lr = pool;
            }
        }
        let history = parse_history(c.get_str("history")?)?;
        Ok((s, history))
    }

    pub fn save(&self, path: &Path, history: &[HistoryRow]) -> Result<()> {
        self.to_container(history)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<HistoryRow>)> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Loads the clinical-to-micro generator from either a training checkpoint
/// or a standalone model file.
pub fn load_generator(path: &Path) -> Result<DifferentiableMap> {
    let c = Container::load(path)?;
    match c.get_str("kind")? {
        "train_state" => DifferentiableMap::from_container(&c, "g1."),
        "map" => DifferentiableMap::from_container(&c, ""),
        other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
    }
}

fn check_shapes(batch: &[Grid2D], side: usize, what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter(format!("{what} batch is empty")));
    }
    match batch.iter().find(|g| g.dims() != (side, side)) {
        Some(g) => Err(Error::DimensionMismatch(format!(
            "{what} patches must be {side}x{side}, got {}x{}",
            g.height(),
            g.width()
        ))),
        None => Ok(()),
    }
}

fn scaled(g: &Grid2D, k: f64) -> Grid2D {
    Grid2D::from_raw(g.height(), g.width(), g.values().iter().map(|v| k * v).collect())
}

fn add_into(acc: &mut Grid2D, g: &Grid2D) {
    *acc = acc.axpby(1.0, g, 1.0).expect("matching gradient dims");
}

/// Adversarial generator term through a discriminator. Returns the loss and
/// the gradient with respect to the discriminator input.
fn adv_through(d: &DifferentiableMap, fake: &Grid2D) -> Result<(f64, Grid2D)> {
    let (out, tape) = d.forward_tape(fake)?;
    let (l, g) = adv_generator_loss_grad(&out);
    let gi = d.backward(tape, &g, None, true)?.expect("input gradient requested");
    Ok((l, gi))
}

/// Least-squares discriminator update gradient over reals and fakes.
/// Returns `0.5 mean_real + 0.5 mean_fake` and the parameter gradient.
fn discriminator_grad(
    d: &DifferentiableMap,
    reals: &[Grid2D],
    fakes: &[Grid2D],
) -> Result<(f64, Vec<f64>)> {
    let mut pg = vec![0.0; d.param_count()];
    let mut loss = 0.0;
    for (set, target) in [(reals, 1.0), (fakes, 0.0)] {
        let w = 0.5 / set.len() as f64;
        for x in set {
            let (out, tape) = d.forward_tape(x)?;
            let (l, g) = least_squares_grad(&out, target);
            loss += w * l;
            d.backward(tape, &scaled(&g, w), Some(&mut pg), false)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("`{}` loss {loss}", d.topology().name)));
    }
    Ok((loss, pg))
}

/// One generator update followed by one update of each discriminator.
pub fn train_step(
    state: &mut TrainState,
    clinical: &[Grid2D],
    micro: &[Grid2D],
) -> Result<LossReport> {
    check_shapes(clinical, LR_PATCH, "clinical")?;
    check_shapes(micro, HR_PATCH, "micro")?;
    let cfg = state.config.clone();
    let w = cfg.weights;
    let sp = SsimParams::normalized();
    let eps = cfg.ssim_eps;

    let mixed = mix_batch(clinical, micro, cfg.mix_ratio, &mut state.rng)?;
    let a_batch = &mixed.items;
    let na = a_batch.len() as f64;
    let nb = micro.len() as f64;

    let d_before = [state.param_hashes()[2].clone(), state.param_hashes()[3].clone()];

    let mut terms = GeneratorTerms::default();
    let mut g1_grad = vec![0.0; state.g1.param_count()];
    let mut g2_grad = vec![0.0; state.g2.param_count()];
    let mut fakes_hr = Vec::with_capacity(a_batch.len());
    let mut fakes_lr = Vec::with_capacity(micro.len());
    let modified = cfg.baseline_mode == BaselineMode::Modified;
    let cyclic = cfg.baseline_mode == BaselineMode::OriginalCyclegan;
    if modified {
        terms.downsample = Some(0.0);
        terms.upsample = Some(0.0);
        terms.clinical_ssim = Some(0.0);
        terms.micro_ssim = Some(0.0);
    }
    if cyclic {
        terms.cycle = Some(0.0);
    }
    let bump = |slot: &mut Option<f64>, v: f64| {
        if let Some(s) = slot {
            *s += v;
        }
    };

    // A side: clinical (and mixed-in) patches through G1.
    for a in a_batch {
        let (a_sr, tape) = state.g1.forward_tape(a)?;
        let (adv, mut grad) = adv_through(&state.d1, &a_sr)?;
        terms.adv_g1 += adv / na;
        grad = scaled(&grad, w.w_adv / na);
        if modified {
            let (ld, gd) = l_downsample_grad(a, &a_sr)?;
            let (ls, gs) = l_clinical_ssim_grad(a, &a_sr, &sp, eps)?;
            bump(&mut terms.downsample, ld / na);
            bump(&mut terms.clinical_ssim, ls / na);
            add_into(&mut grad, &scaled(&gd, w.w_down / na));
            add_into(&mut grad, &scaled(&gs, w.w_ssim_c / na));
        }
        if cyclic {
            let (rec, tape2) = state.g2.forward_tape(&a_sr)?;
            let (lc, gc) = cycle_l1_grad(a, &rec)?;
            bump(&mut terms.cycle, lc / na);
            let gi = state
                .g2
                .backward(tape2, &scaled(&gc, w.w_cycle / na), Some(&mut g2_grad), true)?
                .expect("input gradient requested");
            add_into(&mut grad, &gi);
        }
        state.g1.backward(tape, &grad, Some(&mut g1_grad), false)?;
        fakes_hr.push(a_sr);
    }

    // B side: micro patches through G2.
    for b in micro {
        let (b_lr, tape) = state.g2.forward_tape(b)?;
        let (adv, mut grad) = adv_through(&state.d2, &b_lr)?;
        terms.adv_g2 += adv / nb;
        grad = scaled(&grad, w.w_adv / nb);
        if modified {
            let (lu, gu) = l_upsample_grad(b, &b_lr)?;
            let (ls, gs) = l_micro_ssim_grad(b, &b_lr, &sp, eps)?;
            bump(&mut terms.upsample, lu / nb);
            bump(&mut terms.micro_ssim, ls / nb);
            add_into(&mut grad, &scaled(&gu, w.w_up / nb));
            add_into(&mut grad, &scaled(&gs, w.w_ssim_m / nb));
        }
        if cyclic {
            let (rec, tape1) = state.g1.forward_tape(&b_lr)?;
            let (lc, gc) = cycle_l1_grad(b, &rec)?;
            bump(&mut terms.cycle, lc / nb);
            let gi = state
                .g1
                .backward(tape1, &scaled(&gc, w.w_cycle / nb), Some(&mut g1_grad), true)?
                .expect("input gradient requested");
            add_into(&mut grad, &gi);
        }
        state.g2.backward(tape, &grad, Some(&mut g2_grad), false)?;
        fakes_lr.push(b_lr);
    }

    // Validates every term before any parameter moves.
    let total_g = crate::losses::total_generator_loss(&terms, &w)
        .map_err(|e| Error::NonFinite(format!("step {}: {e}; terms {terms:?}", state.step)))?;
    if g1_grad.iter().chain(&g2_grad).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "step {}: generator gradient (total_g {total_g}, terms {terms:?})",
            state.step
        )));
    }
    state.opt[0].step(state.g1.params_mut(), &g1_grad);
    state.opt[1].step(state.g2.params_mut(), &g2_grad);
    let hashes = state.param_hashes();
    if [hashes[2].clone(), hashes[3].clone()] != d_before {
        return Err(Error::NonFinite("generator update touched discriminator parameters".into()));
    }

    let g_before = [hashes[0].clone(), hashes[1].clone()];
    let pooled_hr = state.pool_hr.query(&fakes_hr, &mut state.rng);
    let pooled_lr = state.pool_lr.query(&fakes_lr, &mut state.rng);
    let (adv_d1, d1_grad) = discriminator_grad(&state.d1, micro, &pooled_hr)?;
    let (adv_d2, d2_grad) = discriminator_grad(&state.d2, clinical, &pooled_lr)?;
    state.opt[2].step(state.d1.params_mut(), &d1_grad);
    state.opt[3].step(state.d2.params_mut(), &d2_grad);
    let hashes = state.param_hashes();
    if [hashes[0].clone(), hashes[1].clone()] != g_before {
        return Err(Error::NonFinite("discriminator update touched generator parameters".into()));
    }

    let report = LossReport::from_terms(&terms, adv_d1, adv_d2, &w)?;
    if !report.all_finite() {
        return Err(Error::NonFinite(format!("step {}: {report:?}", state.step)));
    }
    state.step += 1;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    pub report: LossReport,
}

const HISTORY_HEADER: [&str; 2] = ["epoch", "step"];

pub fn history_csv(rows: &[HistoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = HISTORY_HEADER.to_vec();
    header.extend(LossReport::default().fields().iter().map(|(n, _)| *n));
    let csv_err = |e: csv::Error| Error::Checkpoint(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.epoch.to_string(), r.step.to_string()];
        rec.extend(
            r.report
                .fields()
                .iter()
                .map(|(_, v)| v.map(|x| format!("{x:?}")).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| Error::Checkpoint(format!("loss history: {m}"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 13 {
            return Err(bad(format!("expected 13 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<Option<f64>> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(format!("bad number `{s}`")))
            }
        };
        let req = |i: usize| num(i)?.ok_or_else(|| bad(format!("column {i} is empty")));
        rows.push(HistoryRow {
            epoch: rec[0].parse().map_err(|_| bad("bad epoch".into()))?,
            step: rec[1].parse().map_err(|_| bad("bad step".into()))?,
            report: LossReport {
                adv_g1: req(2)?,
                adv_g2: req(3)?,
                adv_d1: req(4)?,
                adv_d2: req(5)?,
                downsample: num(6)?,
                upsample: num(7)?,
                clinical_ssim: num(8)?,
                micro_ssim: num(9)?,
                cycle: num(10)?,
                total_g: req(11)?,
                total_d: req(12)?,
            },
        });
    }
    Ok(rows)
}

pub const HISTORY_FILE: &str = "loss_history.csv";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"))
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Directory for checkpoints and the loss history.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh start.
    pub resume: Option<PathBuf>,
    /// Stop once this many epochs are complete (for interrupted runs).
    pub stop_after: Option<usize>,
    /// Cap on steps per epoch; `None` uses all clinical patches.
    pub max_steps_per_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn steps_per_epoch(n_clinical: usize, batch_size: usize) -> usize {
    n_clinical / batch_size
}

/// Runs `epochs x steps_per_epoch` training steps over shuffled patch
/// streams, saving checkpoints and the loss history under `out_dir`.
pub fn fit(
    config: &TrainConfig,
    clinical: &[Grid2D],
    micro: &[Grid2D],
    opts: &FitOptions,
) -> Result<FitResult> {
    config.validate()?;
    if clinical.is_empty() || micro.is_empty() {
        return Err(Error::InvalidParameter("both patch sources must be non-empty".into()));
    }
    let mut spe = steps_per_epoch(clinical.len(), config.batch_size);
    if let Some(cap) = opts.max_steps_per_epoch {
        spe = spe.min(cap);
    }
    if spe == 0 {
        return Err(Error::InvalidParameter(format!(
            "{} clinical patches cannot fill one batch of {}",
            clinical.len(),
            config.batch_size
        )));
    }
    if micro.len() < config.batch_size {
        return Err(Error::InvalidParameter(format!(
            "micro source exhausted: {} patches for batches of {}",
            micro.len(),
            config.batch_size
        )));
    }
    let (mut state, mut history) = match &opts.resume {
        Some(p) => {
            let (s, h) = TrainState::load(p)?;
            if s.config.hash() != config.hash() {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different config",
                    p.display()
                )));
            }
            (s, h)
        }
        None => (TrainState::new(config.clone())?, Vec::new()),
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let last = opts.stop_after.unwrap_or(config.epochs).min(config.epochs);
    let mut checkpoints = Vec::new();
    let n = config.batch_size;
    while state.epoch < last {
        let mut ci: Vec<usize> = (0..clinical.len()).collect();
        let mut mi: Vec<usize> = (0..micro.len()).collect();
        ci.shuffle(&mut state.rng);
        mi.shuffle(&mut state.rng);
        for s in 0..spe {
            let a: Vec<Grid2D> = ci[s * n..(s + 1) * n].iter().map(|&i| clinical[i].clone()).collect();
            let b: Vec<Grid2D> = (s * n..(s + 1) * n)
                .map(|k| micro[mi[k % micro.len()]].clone())
                .collect();
            let report = train_step(&mut state, &a, &b)?;
            history.push(HistoryRow {
                epoch: state.epoch,
                step: state.step,
                report,
            });
        }
        state.epoch += 1;
        log::info!(
            "epoch {}/{}: total_g {:.5} total_d {:.5}",
            state.epoch,
            config.epochs,
            history.last().map_or(f64::NAN, |r| r.report.total_g),
            history.last().map_or(f64::NAN, |r| r.report.total_d)
        );
        if let Some(dir) = &opts.out_dir {
            let periodic = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
            if periodic || state.epoch == last {
                let p = checkpoint_path(dir, state.epoch);
                state.save(&p, &history)?;
                checkpoints.push(p);
                let hp = dir.join(HISTORY_FILE);
                fs::write(&hp, history_csv(&history)?).map_err(|e| Error::io(&hp, e))?;
            }
        }
    }
    Ok(FitResult {
        state,
        history,
        checkpoints,
    })
}
