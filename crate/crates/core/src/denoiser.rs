//! The two point-cloud networks.
//!
//! Both share one backbone. A condition branch encodes the sparse cloud
//! with set-abstraction (SA) blocks. A main branch encodes the cloud being
//! processed, fusing condition features at every resolution through
//! feature-transfer (FT) blocks. Feature-propagation (FP) blocks then decode
//! back to full resolution. [`Edn`] predicts coordinate noise plus a polarity
//! logit and receives a diffusion-step embedding. [`Ern`] predicts
//! per-point displacements without one.
//!
//! Neighborhood geometry is derived from point positions only and is
//! treated as constant when differentiating.

use rand::Rng;

use crate::error::{Error, Result};
use crate::event::{EventCloud, Point3};
use crate::geometry::{
    centroid_nearest, farthest_point_sample_from, knn, CuboidSpec, Grouping, Neighborhoods,
};
use crate::nn::{
    sinusoidal_step_embedding, AttentionPool, Dense, Mlp, ParamId, ParamStore, Tape, Tensor, Var,
};

/// Neighbors blended by the upsampling interpolation.
pub const INTERP_K: usize = 3;

/// Per-point input features: `x, y, t, polarity`.
const INPUT_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub levels: usize,
    pub widths: Vec<usize>,
    /// Points kept by each SA level of the main branch.
    pub sa_points: Vec<usize>,
    /// Points kept by each SA level of the condition branch.
    pub cond_sa_points: Vec<usize>,
    /// Neighborhood for SA level `l`, and for FT at resolution `l`.
    pub cuboids: Vec<CuboidSpec>,
    pub step_embed_dim: usize,
    /// Replace every cuboid with a ball of radius `r`.
    pub use_ball_query: bool,
}

impl NetworkConfig {
    /// Three levels of widths 32, 64 and 128 for an `n`-point main cloud and
    /// an `m`-point condition, each level halving the point count.
    pub fn new(n: usize, m: usize) -> Self {
        let levels = 3;
        Self {
            levels,
            widths: vec![32, 64, 128],
            sa_points: (1..=levels).map(|l| (n >> l).max(1)).collect(),
            cond_sa_points: (1..=levels).map(|l| (m >> l).max(1)).collect(),
            cuboids: (0..levels)
                .map(|l| CuboidSpec {
                    r: 0.15 * f64::from(1u32 << l),
                    t_scale: 2.0,
                    max_k: 16,
                })
                .collect(),
            step_embed_dim: 64,
            use_ball_query: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l == 0 {
            return Err(Error::invalid("network needs at least one level"));
        }
        if self.widths.len() != l
            || self.sa_points.len() != l
            || self.cond_sa_points.len() != l
            || self.cuboids.len() != l
        {
            return Err(Error::invalid(format!(
                "per-level settings must all have {l} entries"
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        for counts in [&self.sa_points, &self.cond_sa_points] {
            if counts[0] == 0 || counts.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::invalid(format!(
                    "SA point counts {counts:?} must be positive and strictly decreasing"
                )));
            }
        }
        for c in &self.cuboids {
            CuboidSpec::new(c.r, c.t_scale, c.max_k)?;
        }
        if self.step_embed_dim < 2 || self.step_embed_dim % 2 != 0 {
            return Err(Error::invalid("step embedding width must be even and at least 2"));
        }
        Ok(())
    }

    pub fn grouping(&self, level: usize) -> Grouping {
        let c = self.cuboids[level.min(self.levels - 1)];
        if self.use_ball_query {
            Grouping::Ball {
                radius: c.r,
                max_k: c.max_k,
            }
        } else {
            Grouping::Cuboid(c)
        }
    }
}

/// Output of one EDN evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub noise_pred: Vec<Point3>,
    pub polarity_logit: Vec<f64>,
}

fn input_features(coords: &[Point3], polarity: &[f64]) -> Result<Tensor> {
    if coords.len() != polarity.len() {
        return Err(Error::invalid(format!(
            "{} points but {} polarity values",
            coords.len(),
            polarity.len()
        )));
    }
    let data = coords
        .iter()
        .zip(polarity)
        .flat_map(|(c, &p)| [c[0], c[1], c[2], p])
        .collect();
    Tensor::from_vec(coords.len(), INPUT_DIM, data)
}

fn to_points(t: &Tensor) -> Vec<Point3> {
    (0..t.rows).map(|i| [t.row(i)[0], t.row(i)[1], t.row(i)[2]]).collect()
}

fn finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_owned()))
    }
}

/// Neighbor rows around each center: the gathered indices, group offsets
/// and the scaled relative positions as an `R×3` constant.
struct Groups {
    index: Vec<usize>,
    offsets: Vec<usize>,
    rel: Tensor,
}

fn group(points: &[Point3], centers: &[Point3], grouping: Grouping) -> Result<Groups> {
    let nb = Neighborhoods::new(points, grouping);
    let scale = grouping.offset_scale();
    let mut index = Vec::new();
    let mut offsets = Vec::with_capacity(centers.len() + 1);
    let mut rel = Vec::new();
    offsets.push(0);
    for c in centers {
        for i in nb.query(c) {
            let p = points[i];
            rel.extend((0..3).map(|a| (p[a] - c[a]) * scale[a]));
            index.push(i);
        }
        offsets.push(index.len());
    }
    let rel = Tensor::from_vec(index.len(), 3, rel)?;
    Ok(Groups {
        index,
        offsets,
        rel,
    })
}

fn add_step(tape: &mut Tape<'_>, h: Var, proj: Option<&Dense>, step: Option<Var>) -> Result<Var> {
    match (proj, step) {
        (Some(d), Some(s)) => {
            let row = d.forward(tape, s)?;
            tape.add_row(h, row)
        }
        (None, None) => Ok(h),
        _ => Err(Error::invalid("step embedding given to a block without one, or missing")),
    }
}

/// Subsample-and-aggregate encoder block.
#[derive(Debug, Clone)]
pub struct SetAbstraction {
    mlp: Mlp,
    pool: AttentionPool,
    step: Option<Dense>,
}

impl SetAbstraction {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        width: usize,
        step_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[3 + d_in, width, width], true, rng),
            pool: AttentionPool::new(store, name, width, rng),
            step: step_dim.map(|e| Dense::new(store, &format!("{name}.step"), e, width, rng)),
        }
    }

    /// Keeps `m` farthest-point centers (started at the point nearest the
    /// centroid) and pools an MLP of `(scaled offset, feature)` over each
    /// center's neighborhood.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        points: &[Point3],
        feats: Var,
        m: usize,
        grouping: Grouping,
        step: Option<Var>,
    ) -> Result<(Vec<Point3>, Var)> {
        if m > points.len() || m == 0 {
            return Err(Error::invalid(format!(
                "set abstraction cannot keep {m} of {} points",
                points.len()
            )));
        }
        let start = centroid_nearest(points);
        let centers: Vec<Point3> = farthest_point_sample_from(points, m, start)?
            .into_iter()
            .map(|i| points[i])
            .collect();
        let g = group(points, &centers, grouping)?;
        let rel = tape.constant(g.rel);
        let gathered = tape.gather(feats, g.index)?;
        let rows = tape.concat(rel, gathered)?;
        let h = self.mlp.forward(tape, rows)?;
        let h = self.pool.forward(tape, h, g.offsets)?;
        let h = add_step(tape, h, self.step.as_ref(), step)?;
        Ok((centers, h))
    }
}

/// Inverse-distance interpolation plan from `coarse` onto `fine`: `k`
/// neighbor indices and normalized weights per fine point.
pub fn interpolation_weights(coarse: &[Point3], fine: &[Point3]) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if coarse.is_empty() {
        return Err(Error::invalid("interpolation from an empty point set"));
    }
    let k = INTERP_K.min(coarse.len());
    let mut index = Vec::with_capacity(fine.len() * k);
    let mut weights = Vec::with_capacity(fine.len() * k);
    for p in fine {
        let nn = knn(coarse, p, k)?;
        let w: Vec<f64> = nn.iter().map(|&(_, d)| 1.0 / (d + 1e-8)).collect();
        let z: f64 = w.iter().sum();
        index.extend(nn.iter().map(|&(i, _)| i));
        weights.extend(w.iter().map(|v| v / z));
    }
    Ok((index, weights, k))
}

/// Upsampling decoder block with a sigmoid channel gate.
#[derive(Debug, Clone)]
pub struct FeaturePropagation {
    mlp: Mlp,
    gate: Dense,
    step: Option<Dense>,
}

impl FeaturePropagation {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_coarse: usize,
        d_skip: usize,
        width: usize,
        step_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d_coarse + d_skip, width, width], true, rng),
            gate: Dense::new(store, &format!("{name}.gate"), width, width, rng),
            step: step_dim.map(|e| Dense::new(store, &format!("{name}.step"), e, width, rng)),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        coarse: &[Point3],
        coarse_feats: Var,
        fine: &[Point3],
        skip: Var,
        step: Option<Var>,
    ) -> Result<Var> {
        if fine.len() < coarse.len() {
            return Err(Error::invalid(format!(
                "cannot propagate {} points onto {}",
                coarse.len(),
                fine.len()
            )));
        }
        let (index, weights, k) = interpolation_weights(coarse, fine)?;
        let interp = tape.weighted_gather(coarse_feats, index, weights, k)?;
        let x = tape.concat(interp, skip)?;
        let h = self.mlp.forward(tape, x)?;
        let g = self.gate.forward(tape, h)?;
        let g = tape.sigmoid(g);
        let h = tape.mul(h, g)?;
        add_step(tape, h, self.step.as_ref(), step)
    }
}

/// Cross-branch block: pools condition features around each main-branch
/// point and appends the result to that point's features.
///
/// Pooled values depend on condition features alone; the relative position
/// of each neighbor only enters the attention score.
#[derive(Debug, Clone)]
pub struct FeatureTransfer {
    mlp: Mlp,
    score: ParamId,
}

impl FeatureTransfer {
    pub fn new(store: &mut ParamStore, name: &str, d_cond: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[d_cond, width, width], true, rng),
            score: store.add_uniform(&format!("{name}.score"), 3 + width, 1, rng),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        points: &[Point3],
        feats: Var,
        cond: &[Point3],
        cond_feats: Var,
        grouping: Grouping,
    ) -> Result<Var> {
        if cond.is_empty() {
            return Err(Error::invalid("feature transfer from an empty condition"));
        }
        let g = group(cond, points, grouping)?;
        let rel = tape.constant(g.rel);
        let gathered = tape.gather(cond_feats, g.index)?;
        let h = self.mlp.forward(tape, gathered)?;
        let keyed = tape.concat(rel, h)?;
        let scores = tape.dense(keyed, self.score, None)?;
        let pooled = tape.group_attention(h, scores, g.offsets)?;
        tape.concat(feats, pooled)
    }
}

/// Condition-branch features at every resolution, recorded on a tape.
#[derive(Debug, Clone)]
pub struct ConditionFeatures {
    points: Vec<Vec<Point3>>,
    feats: Vec<Var>,
}

/// Condition-branch features detached from any tape, so one encoding can
/// serve every step of a sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCache {
    points: Vec<Vec<Point3>>,
    feats: Vec<Tensor>,
}

impl ConditionCache {
    pub fn attach(&self, tape: &mut Tape<'_>) -> ConditionFeatures {
        ConditionFeatures {
            points: self.points.clone(),
            feats: self.feats.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct Backbone {
    cfg: NetworkConfig,
    cond_sa: Vec<SetAbstraction>,
    sa: Vec<SetAbstraction>,
    ft: Vec<FeatureTransfer>,
    fp: Vec<FeaturePropagation>,
    head_hidden: Dense,
    head_out: Dense,
    step_mlp: Option<Mlp>,
}

impl Backbone {
    fn new(
        cfg: NetworkConfig,
        prefix: &str,
        out_dim: usize,
        with_step: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels;
        let w = &cfg.widths;
        let e = cfg.step_embed_dim;
        let step_dim = with_step.then_some(e);

        let step_mlp = with_step.then(|| Mlp::new(store, &format!("{prefix}.step_mlp"), &[e, e, e], true, rng));

        let mut cond_sa = Vec::with_capacity(levels);
        let mut cond_dims = vec![INPUT_DIM];
        for l in 0..levels {
            cond_sa.push(SetAbstraction::new(
                store,
                &format!("{prefix}.cond_sa{l}"),
                cond_dims[l],
                w[l],
                None,
                rng,
            ));
            cond_dims.push(w[l]);
        }

        // FT at resolution 0 contributes widths[0] channels, and at
        // resolution l > 0 as many as the SA block feeding it.
        let ft_width = |l: usize| if l == 0 { w[0] } else { w[l - 1] };
        let mut ft = Vec::with_capacity(levels + 1);
        let mut sa = Vec::with_capacity(levels);
        let mut dims = vec![INPUT_DIM + ft_width(0)];
        ft.push(FeatureTransfer::new(store, &format!("{prefix}.ft0"), cond_dims[0], ft_width(0), rng));
        for l in 0..levels {
            sa.push(SetAbstraction::new(store, &format!("{prefix}.sa{l}"), dims[l], w[l], step_dim, rng));
            ft.push(FeatureTransfer::new(
                store,
                &format!("{prefix}.ft{}", l + 1),
                cond_dims[l + 1],
                ft_width(l + 1),
                rng,
            ));
            dims.push(w[l] + ft_width(l + 1));
        }

        let mut fp: Vec<FeaturePropagation> = Vec::with_capacity(levels);
        for l in 0..levels {
            let d_coarse = if l + 1 == levels { dims[levels] } else { w[l + 1] };
            fp.push(FeaturePropagation::new(
                store,
                &format!("{prefix}.fp{l}"),
                d_coarse,
                dims[l],
                w[l],
                step_dim,
                rng,
            ));
        }

        let head_hidden = Dense::new(store, &format!("{prefix}.head.0"), w[0], w[0], rng);
        let head_out = Dense::zeroed(store, &format!("{prefix}.head.1"), w[0], out_dim);
        Ok(Self {
            cfg,
            cond_sa,
            sa,
            ft,
            fp,
            head_hidden,
            head_out,
            step_mlp,
        })
    }

    fn encode_condition(&self, tape: &mut Tape<'_>, c: &EventCloud) -> Result<ConditionFeatures> {
        if c.is_empty() {
            return Err(Error::invalid("empty condition cloud"));
        }
        let mut points = vec![c.coords().to_vec()];
        let mut feats = vec![tape.constant(input_features(c.coords(), c.polarity())?)];
        for l in 0..self.cfg.levels {
            let m = self.cfg.cond_sa_points[l].min(points[l].len());
            let (p, h) = self.cond_sa[l].forward(tape, &points[l], feats[l], m, self.cfg.grouping(l), None)?;
            points.push(p);
            feats.push(h);
        }
        Ok(ConditionFeatures { points, feats })
    }

    fn step_embedding(&self, tape: &mut Tape<'_>, t: Option<f64>) -> Result<Option<Var>> {
        match (&self.step_mlp, t) {
            (Some(mlp), Some(t)) => {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(Error::invalid(format!("invalid diffusion step {t}")));
                }
                let e = sinusoidal_step_embedding(t, self.cfg.step_embed_dim)?;
                let e = tape.constant(Tensor::from_vec(1, e.len(), e)?);
                Ok(Some(mlp.forward(tape, e)?))
            }
            (None, None) => Ok(None),
            _ => Err(Error::invalid("diffusion step given to a network without one, or missing")),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<'_>,
        coords: &[Point3],
        polarity: &[f64],
        cond: &ConditionFeatures,
        t: Option<f64>,
    ) -> Result<Var> {
        let levels = self.cfg.levels;
        if cond.points.len() != levels + 1 {
            return Err(Error::invalid("condition features do not match the network depth"));
        }
        if self.cfg.sa_points[0] > coords.len() {
            return Err(Error::invalid(format!(
                "network expects at least {} points, got {}",
                self.cfg.sa_points[0],
                coords.len()
            )));
        }
        let step = self.step_embedding(tape, t)?;
        let x0 = tape.constant(input_features(coords, polarity)?);
        let mut points = vec![coords.to_vec()];
        let f0 = self.ft[0].forward(tape, &points[0], x0, &cond.points[0], cond.feats[0], self.cfg.grouping(0))?;
        let mut fused = vec![f0];
        for l in 0..levels {
            let (p, h) = self.sa[l].forward(
                tape,
                &points[l],
                fused[l],
                self.cfg.sa_points[l],
                self.cfg.grouping(l),
                step,
            )?;
            let f = self.ft[l + 1].forward(
                tape,
                &p,
                h,
                &cond.points[l + 1],
                cond.feats[l + 1],
                self.cfg.grouping(l + 1),
            )?;
            points.push(p);
            fused.push(f);
        }
        let mut h = fused[levels];
        for l in (0..levels).rev() {
            h = self.fp[l].forward(tape, &points[l + 1], h, &points[l], fused[l], step)?;
        }
        let h = self.head_hidden.forward(tape, h)?;
        let h = tape.leaky_relu(h);
        self.head_out.forward(tape, h)
    }

    fn condition_cache(&self, params: &ParamStore, c: &EventCloud) -> Result<ConditionCache> {
        let mut tape = Tape::new(params);
        let enc = self.encode_condition(&mut tape, c)?;
        let feats = enc.feats.iter().map(|&v| tape.value(v).clone()).collect();
        Ok(ConditionCache {
            points: enc.points,
            feats,
        })
    }
}

/// Conditional noise predictor.
#[derive(Debug, Clone)]
pub struct Edn {
    net: Backbone,
}

impl Edn {
    /// Registers a fresh network's parameters (prefixed `edn.`) in `store`.
    pub fn new(cfg: NetworkConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            net: Backbone::new(cfg, "edn", 4, true, store, rng)?,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.cfg
    }

    pub fn encode_condition(&self, tape: &mut Tape<'_>, c: &EventCloud) -> Result<ConditionFeatures> {
        self.net.encode_condition(tape, c)
    }

    pub fn condition_cache(&self, params: &ParamStore, c: &EventCloud) -> Result<ConditionCache> {
        self.net.condition_cache(params, c)
    }

    /// Records one evaluation at (possibly fractional) step `t`. Returns the
    /// `N×3` noise prediction and the `N×1` polarity logits.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        e_t: &[Point3],
        polarity: &[f64],
        cond: &ConditionFeatures,
        t: f64,
    ) -> Result<(Var, Var)> {
        let out = self.net.forward(tape, e_t, polarity, cond, Some(t))?;
        let noise = tape.slice_cols(out, 0, 3)?;
        let logit = tape.slice_cols(out, 3, 1)?;
        Ok((noise, logit))
    }

    pub fn predict(
        &self,
        params: &ParamStore,
        e_t: &[Point3],
        polarity: &[f64],
        cond: &ConditionCache,
        t: f64,
    ) -> Result<DenoiserOutput> {
        let mut tape = Tape::new(params);
        let cond = cond.attach(&mut tape);
        let (noise, logit) = self.forward(&mut tape, e_t, polarity, &cond, t)?;
        finite(tape.value(noise), "noise prediction")?;
        finite(tape.value(logit), "polarity logit")?;
        Ok(DenoiserOutput {
            noise_pred: to_points(tape.value(noise)),
            polarity_logit: tape.value(logit).data.clone(),
        })
    }
}

/// One EDN evaluation on noisy coordinates `e_t` (with its polarity
/// feature) given condition `c`.
pub fn edn_forward(
    model: &Edn,
    params: &ParamStore,
    e_t: &[Point3],
    polarity: &[f64],
    c: &EventCloud,
    t: f64,
) -> Result<DenoiserOutput> {
    let cache = model.condition_cache(params, c)?;
    model.predict(params, e_t, polarity, &cache, t)
}

/// Displacement refiner.
#[derive(Debug, Clone)]
pub struct Ern {
    net: Backbone,
}

impl Ern {
    /// Registers a fresh network's parameters (prefixed `ern.`) in `store`.
    pub fn new(cfg: NetworkConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            net: Backbone::new(cfg, "ern", 3, false, store, rng)?,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.net.cfg
    }

    pub fn encode_condition(&self, tape: &mut Tape<'_>, c: &EventCloud) -> Result<ConditionFeatures> {
        self.net.encode_condition(tape, c)
    }

    pub fn condition_cache(&self, params: &ParamStore, c: &EventCloud) -> Result<ConditionCache> {
        self.net.condition_cache(params, c)
    }

    /// Records the refined `N×3` coordinates: `clamp(coarse + Δ, -1, 1)`.
    pub fn forward(&self, tape: &mut Tape<'_>, coarse: &EventCloud, cond: &ConditionFeatures) -> Result<Var> {
        let disp = self.net.forward(tape, coarse.coords(), coarse.polarity(), cond, None)?;
        let base = tape.constant(Tensor::from_rows(coarse.coords()));
        let moved = tape.add(base, disp)?;
        Ok(tape.clamp(moved, -1.0, 1.0))
    }

    pub fn refine(&self, params: &ParamStore, coarse: &EventCloud, cond: &ConditionCache) -> Result<EventCloud> {
        let mut tape = Tape::new(params);
        let cond = cond.attach(&mut tape);
        let out = self.forward(&mut tape, coarse, &cond)?;
        finite(tape.value(out), "refined coordinates")?;
        EventCloud::new(to_points(tape.value(out)), coarse.polarity().to_vec())
    }
}

/// Refines `coarse` given condition `c`; polarity is passed through.
pub fn ern_forward(model: &Ern, params: &ParamStore, coarse: &EventCloud, c: &EventCloud) -> Result<EventCloud> {
    let cache = model.condition_cache(params, c)?;
    model.refine(params, coarse, &cache)
}
