//! Level-set Cox process: a Poisson process whose piecewise-constant
//! intensity is determined by threshold level sets of a latent Gaussian
//! Markov field on a unit lattice.
//!
//! Two samplers target the same posterior. The augmented Gibbs sampler
//! (AGS) conditions every block on an auxiliary Poisson process whose
//! counts drive an unbiased estimator of the intractable exponential
//! `exp{-∫ lambda}`. The partially collapsed sampler (CGS) integrates the
//! auxiliary process out of the intensity update and simulates the Barker
//! acceptance event with a divide-and-conquer factory over unit tiles,
//! using direct 2-coin leaves for tiles outside a level set and flipped
//! leaves for tiles inside it.
//!
//! The latent field is piecewise constant per lattice cell and the tiles
//! coincide with the cells, so level-set areas within a tile are exact and
//! every coin reduces to a constant-height Poisson coin.

use rand_distr::Distribution;

use crate::coin::{FlipOutcome, WeightedCoin};
use crate::error::{Error, Result};
use crate::factories::{DcbfLeaf, FactorPair, FactoryOpts, PortkeyConfig, TwoCoinForm};
use crate::ledger::CostLedger;
use crate::mcmc::{barker_step, ChainConfig, ChainTrace, TraceRow};
use crate::partition::PartitionTree;
use crate::poisson::{ConstantPath, PoissonCoinSource};
use crate::rng::RandomStream;

/// Fixed-hyperparameter level-set model: `L` intensity levels cut from a
/// zero-mean lattice field by fixed thresholds, independent uniform priors
/// on the intensities, and the auxiliary-process dominating factor `nu`.
#[derive(Debug, Clone)]
pub struct LevelSetModel {
    /// Interior thresholds, strictly increasing; `levels() = len + 1`.
    pub thresholds: Vec<f64>,
    pub prior_lo: f64,
    pub prior_hi: f64,
    pub nu: f64,
    /// Field precision: `tau * (kappa I + graph Laplacian)` on the
    /// 4-neighbour lattice.
    pub gmrf_tau: f64,
    pub gmrf_kappa: f64,
}

impl LevelSetModel {
    /// The shipped two-level experiment: threshold 0, uniform priors on
    /// (0.01, 10), `nu = 5`.
    pub fn experiment() -> Self {
        Self {
            thresholds: vec![0.0],
            prior_lo: 0.01,
            prior_hi: 10.0,
            nu: 5.0,
            gmrf_tau: 1.0,
            gmrf_kappa: 0.25,
        }
    }

    pub fn levels(&self) -> usize {
        self.thresholds.len() + 1
    }

    pub fn level_of(&self, z: f64) -> usize {
        self.thresholds.partition_point(|&u| z >= u)
    }

    pub fn in_support(&self, theta: f64) -> bool {
        theta > self.prior_lo && theta < self.prior_hi
    }
}

/// Latent field values on a `side x side` unit lattice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    pub side: usize,
    pub z: Vec<f64>,
}

impl LatentField {
    pub fn constant(side: usize, value: f64) -> Self {
        Self {
            side,
            z: vec![value; side * side],
        }
    }

    /// Ground-truth field of the experiment DGP: the left half of the
    /// square below the first threshold, the right half above it.
    pub fn vertical_split(side: usize) -> Self {
        let mut field = Self::constant(side, 1.0);
        for iy in 0..side {
            for ix in 0..side / 2 {
                field.z[iy * side + ix] = -1.0;
            }
        }
        field
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    /// Cell index containing a point of the square `[0, side]^2`.
    pub fn cell_of(&self, x: f64, y: f64) -> usize {
        let ix = (x.floor() as usize).min(self.side - 1);
        let iy = (y.floor() as usize).min(self.side - 1);
        iy * self.side + ix
    }

    pub fn neighbours(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let side = self.side;
        let (ix, iy) = (cell % side, cell / side);
        [
            (ix > 0).then(|| cell - 1),
            (ix + 1 < side).then(|| cell + 1),
            (iy > 0).then(|| cell - side),
            (iy + 1 < side).then(|| cell + side),
        ]
        .into_iter()
        .flatten()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        for row in self.z.chunks(self.side) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut z = Vec::new();
        let mut side = 0usize;
        for line in input.lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                        what: "latent field",
                        detail: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            if side == 0 {
                side = row.len();
            } else if row.len() != side {
                return Err(Error::Parse {
                    what: "latent field",
                    detail: "ragged rows".into(),
                });
            }
            z.extend(row);
        }
        if z.len() != side * side {
            return Err(Error::Parse {
                what: "latent field",
                detail: "field is not square".into(),
            });
        }
        Ok(Self { side, z })
    }
}

/// Observed point pattern on the square `[0, side]^2` of area `n = side^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxDataset {
    pub side: usize,
    pub points: Vec<(f64, f64)>,
}

impl CoxDataset {
    pub fn area(&self) -> f64 {
        (self.side * self.side) as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "sx,sy")?;
        for (x, y) in &self.points {
            writeln!(out, "{x},{y}")?;
        }
        Ok(())
    }

    /// Sidecar flat key-value description of the observation window.
    pub fn write_geometry<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "side={}", self.side)?;
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(input: R, side: usize) -> Result<Self> {
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h == "sx,sy" => {}
            other => {
                return Err(Error::Parse {
                    what: "cox dataset",
                    detail: format!("expected header sx,sy, got {other:?}"),
                })
            }
        }
        let mut points = Vec::new();
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (x, y) = line.split_once(',').ok_or(Error::Parse {
                what: "cox dataset",
                detail: line.clone(),
            })?;
            let bad = |e: std::num::ParseFloatError| Error::Parse {
                what: "cox dataset",
                detail: e.to_string(),
            };
            points.push((x.parse().map_err(bad)?, y.parse().map_err(bad)?));
        }
        let limit = side as f64;
        if points
            .iter()
            .any(|&(x, y)| !(0.0..=limit).contains(&x) || !(0.0..=limit).contains(&y))
        {
            return Err(Error::Parse {
                what: "cox dataset",
                detail: "point outside observation window".into(),
            });
        }
        Ok(Self { side, points })
    }

    pub fn read_geometry<R: std::io::BufRead>(input: R) -> Result<usize> {
        for line in input.lines() {
            let line = line?;
            if let Some(value) = line.strip_prefix("side=") {
                return value.parse().map_err(|e: std::num::ParseIntError| Error::Parse {
                    what: "cox geometry",
                    detail: e.to_string(),
                });
            }
        }
        Err(Error::Parse {
            what: "cox geometry",
            detail: "missing side key".into(),
        })
    }
}

fn poisson_count(rate: f64, stream: &mut RandomStream) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    rand_distr::Poisson::new(rate)
        .expect("positive rate")
        .sample(stream) as u64
}

/// Draws the two-region experiment dataset: a vertical split with the low
/// intensity on the left and the high intensity on the right, plus the
/// ground-truth field. The expected point count is `side^2 *
/// (theta_low + theta_high) / 2`.
pub fn simulate_lscp(
    theta_low: f64,
    theta_high: f64,
    side: usize,
    stream: &mut RandomStream,
) -> Result<(CoxDataset, LatentField)> {
    if side < 2 || side % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "need an even lattice side >= 2, got {side}"
        )));
    }
    if theta_low <= 0.0 || theta_high <= 0.0 {
        return Err(Error::InvalidInput("intensities must be positive".into()));
    }
    let half = side as f64 / 2.0;
    let mut points = Vec::new();
    for (rate, x_lo, x_hi) in [
        (theta_low, 0.0, half),
        (theta_high, half, side as f64),
    ] {
        let count = poisson_count(rate * half * side as f64, stream);
        for _ in 0..count {
            points.push((
                stream.uniform_in(x_lo, x_hi),
                stream.uniform_in(0.0, side as f64),
            ));
        }
    }
    Ok((
        CoxDataset { side, points },
        LatentField::vertical_split(side),
    ))
}

/// Unbiased estimator of `exp{-∫ lambda_theta(z_s) ds}` given the per-level
/// auxiliary counts: `exp(-mu(S) lambda_min) * prod_l ((nu lambda_max -
/// theta_l) / (nu lambda_max - lambda_min))^{N_l}`, for an auxiliary
/// process of rate `nu lambda_max - lambda_min`.
pub fn ags_estimator(theta: &[f64], nu: f64, area: f64, psi_per_level: &[u64]) -> Result<f64> {
    Ok(log_ags_estimator(theta, nu, area, psi_per_level)?.exp())
}

pub fn log_ags_estimator(
    theta: &[f64],
    nu: f64,
    area: f64,
    psi_per_level: &[u64],
) -> Result<f64> {
    if theta.is_empty() || theta.len() != psi_per_level.len() {
        return Err(Error::InvalidInput(
            "need one auxiliary count per intensity level".into(),
        ));
    }
    let lambda_max = theta.iter().copied().fold(f64::MIN, f64::max);
    let lambda_min = theta.iter().copied().fold(f64::MAX, f64::min);
    let slack = nu * lambda_max - lambda_min;
    if !slack.is_finite() || slack <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "need nu * max(theta) > min(theta), got nu {nu}, theta {theta:?}"
        )));
    }
    let mut log_est = -area * lambda_min;
    for (t, &count) in theta.iter().zip(psi_per_level) {
        log_est += count as f64 * ((nu * lambda_max - t) / (nu * lambda_max - lambda_min)).ln();
    }
    Ok(log_est)
}

/// Auxiliary-process rate implied by the estimator's unbiasedness.
pub fn aux_rate(theta: &[f64], nu: f64) -> f64 {
    let lambda_max = theta.iter().copied().fold(f64::MIN, f64::max);
    let lambda_min = theta.iter().copied().fold(f64::MAX, f64::min);
    nu * lambda_max - lambda_min
}

/// Auxiliary Poisson process, stored as per-cell counts: the levels are
/// constant on cells, so point positions within a cell are exchangeable
/// uniforms that nothing ever evaluates.
#[derive(Debug, Clone, Default)]
pub struct AuxProcess {
    pub count_per_cell: Vec<u32>,
}

impl AuxProcess {
    pub fn total(&self) -> u64 {
        self.count_per_cell.iter().map(|&c| c as u64).sum()
    }
}

/// Mutable sampler state with sufficient-statistic caches.
pub struct CoxState {
    pub theta: Vec<f64>,
    pub field: LatentField,
    pub psi: AuxProcess,
    level: Vec<usize>,
    y_count: Vec<u32>,
    level_cells: Vec<u64>,
    level_y: Vec<u64>,
    level_psi: Vec<u64>,
}

impl CoxState {
    pub fn new(
        model: &LevelSetModel,
        dataset: &CoxDataset,
        field: LatentField,
        theta: Vec<f64>,
    ) -> Result<Self> {
        if field.side != dataset.side {
            return Err(Error::InvalidInput("field and dataset sides differ".into()));
        }
        if theta.len() != model.levels() {
            return Err(Error::InvalidInput("one intensity per level required".into()));
        }
        let cells = field.cells();
        let mut y_count = vec![0u32; cells];
        for &(x, y) in &dataset.points {
            y_count[field.cell_of(x, y)] += 1;
        }
        let level: Vec<usize> = field.z.iter().map(|&z| model.level_of(z)).collect();
        let mut state = Self {
            theta,
            field,
            psi: AuxProcess {
                count_per_cell: vec![0; cells],
            },
            level,
            y_count,
            level_cells: vec![0; model.levels()],
            level_y: vec![0; model.levels()],
            level_psi: vec![0; model.levels()],
        };
        state.rebuild_level_caches(model.levels());
        Ok(state)
    }

    fn rebuild_level_caches(&mut self, levels: usize) {
        self.level_cells = vec![0; levels];
        self.level_y = vec![0; levels];
        self.level_psi = vec![0; levels];
        for cell in 0..self.field.cells() {
            let l = self.level[cell];
            self.level_cells[l] += 1;
            self.level_y[l] += self.y_count[cell] as u64;
            self.level_psi[l] += self.psi.count_per_cell[cell] as u64;
        }
    }

    /// Exact level-set areas on the lattice (unit cells).
    pub fn level_areas(&self) -> Vec<f64> {
        self.level_cells.iter().map(|&c| c as f64).collect()
    }

    pub fn level_y_counts(&self) -> &[u64] {
        &self.level_y
    }

    pub fn level_psi_counts(&self) -> &[u64] {
        &self.level_psi
    }

    pub fn cell_level(&self, cell: usize) -> usize {
        self.level[cell]
    }

    pub fn cell_y_count(&self, cell: usize) -> u32 {
        self.y_count[cell]
    }
}

/// Sampler flavour: the augmented benchmark or the partially collapsed
/// factory-driven sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoxSamplerKind {
    Ags,
    Cgs,
}

#[derive(Debug, Clone)]
pub struct CoxConfig {
    pub model: LevelSetModel,
    pub kind: CoxSamplerKind,
    /// Base scale of the intensity proposals; the halfwidth is
    /// `delta / sqrt(n)` before adaptation.
    pub delta: f64,
    pub depth: Option<u32>,
    /// Initial leaf escape probability for the CGS factory; adapted towards
    /// [`CoxConfig::target_escape`] before recording.
    pub portkey_escape: f64,
    pub target_escape: f64,
    pub adapt_iters: u64,
    /// Keep the latent field fixed at its initial value (oracle runs).
    pub fix_field: bool,
    pub opts: FactoryOpts,
}

impl CoxConfig {
    pub fn new(kind: CoxSamplerKind) -> Self {
        Self {
            model: LevelSetModel::experiment(),
            kind,
            delta: 8.0,
            depth: None,
            portkey_escape: 0.05,
            target_escape: 0.10,
            adapt_iters: 1_000,
            fix_field: false,
            opts: FactoryOpts::default(),
        }
    }
}

/// Factor pair of one unit tile for the level-`l` intensity update.
///
/// Tiles whose centroid lies inside the level set use the flipped form on
/// the complement area (their coins are certain when the tile is fully
/// inside); the rest use the direct form on the intersection area. Both
/// coin probabilities lie in `[exp(-|vartheta - theta|), 1]`.
pub fn cgs_theta_leaf_pair(
    area_in_level: f64,
    y_in_level: u32,
    centroid_in_level: bool,
    theta_l: f64,
    vartheta_l: f64,
) -> Result<(FactorPair, TwoCoinForm)> {
    let up_gap = (vartheta_l - theta_l).max(0.0);
    let down_gap = (theta_l - vartheta_l).max(0.0);
    let q_coin = |gap: f64, region: f64| {
        WeightedCoin::new(
            1.0,
            Box::new(PoissonCoinSource {
                path: ConstantPath {
                    height: gap,
                    horizon: region,
                },
            }),
        )
    };
    let weighted = |scale: f64, gap: f64, region: f64| -> Result<WeightedCoin> {
        let coin = q_coin(gap, region)?;
        WeightedCoin::product(vec![WeightedCoin::certain(scale)?, coin])
    };
    if centroid_in_level {
        let complement = 1.0 - area_in_level;
        let pair = FactorPair::new(
            // Reciprocal representation: the numerator coin carries
            // 1/h(vartheta) via the current-parameter weight.
            weighted(
                theta_l.powi(y_in_level as i32) * (-theta_l).exp(),
                up_gap,
                complement,
            )?,
            weighted(
                vartheta_l.powi(y_in_level as i32) * (-vartheta_l).exp(),
                down_gap,
                complement,
            )?,
        )?;
        Ok((pair, TwoCoinForm::Flipped))
    } else {
        let pair = FactorPair::new(
            weighted(vartheta_l.powi(y_in_level as i32), up_gap, area_in_level)?,
            weighted(theta_l.powi(y_in_level as i32), down_gap, area_in_level)?,
        )?;
        Ok((pair, TwoCoinForm::Direct))
    }
}

fn oriented(pair: FactorPair, form: TwoCoinForm) -> FactorPair {
    match form {
        TwoCoinForm::Direct => pair,
        TwoCoinForm::Flipped => pair.swapped(),
    }
}

/// Both Gibbs samplers plus their adaptation state.
pub struct CoxSampler {
    pub state: CoxState,
    cfg: CoxConfig,
    base_tree: PartitionTree,
    z_stream: RandomStream,
    psi_stream: RandomStream,
    theta_stream: RandomStream,
    shuffle_stream: RandomStream,
    pub ledger: CostLedger,
    // Adapted kernel scales.
    z_step: f64,
    theta_halfwidth: Vec<f64>,
    leaf_escape: f64,
    // Running acceptance statistics for adaptation batches.
    z_proposals: u64,
    z_accepts: u64,
    theta_proposals: Vec<u64>,
    theta_accepts: Vec<u64>,
    theta_escapes: Vec<u64>,
}

impl CoxSampler {
    pub fn new(dataset: &CoxDataset, cfg: CoxConfig, seed: u64) -> Result<Self> {
        let side = dataset.side;
        let n = side * side;
        let model = cfg.model.clone();
        let levels = model.levels();
        let root = RandomStream::new(seed, 0);
        let field = LatentField::vertical_split(side);
        // Empirical per-level point rates under the initial field; starting
        // the intensities consistent with the field's level assignment keeps
        // the chain out of the mirrored (relabelled) posterior mode.
        let probe = CoxState::new(&model, dataset, field.clone(), vec![1.0; levels])?;
        let theta0: Vec<f64> = (0..levels)
            .map(|l| {
                let area = probe.level_areas()[l].max(1.0);
                (probe.level_y_counts()[l] as f64 / area)
                    .clamp(model.prior_lo + 1e-6, model.prior_hi - 1e-6)
            })
            .collect();
        let state = CoxState::new(&model, dataset, field, theta0)?;
        let depth = cfg.depth.unwrap_or_else(|| PartitionTree::default_depth(n));
        let base_tree = PartitionTree::build(n, depth)?;
        let halfwidth = cfg.delta / (n as f64).sqrt();
        let mut sampler = Self {
            z_step: 1.0,
            theta_halfwidth: vec![halfwidth; levels],
            leaf_escape: cfg.portkey_escape,
            z_proposals: 0,
            z_accepts: 0,
            theta_proposals: vec![0; levels],
            theta_accepts: vec![0; levels],
            theta_escapes: vec![0; levels],
            state,
            cfg,
            base_tree,
            z_stream: root.split(10),
            psi_stream: root.split(12),
            theta_stream: root.split(13),
            shuffle_stream: root.split(14),
            ledger: CostLedger::new(),
        };
        // Start the auxiliary process from its conditional law.
        let mut init_stream = root.split(11);
        draw_psi_conditional(&mut sampler.state, &model, &mut init_stream);
        Ok(sampler)
    }

    pub fn theta(&self) -> &[f64] {
        &self.state.theta
    }

    pub fn model(&self) -> &LevelSetModel {
        &self.cfg.model
    }

    fn gmrf_delta(&self, cell: usize, new_z: f64) -> f64 {
        let model = &self.cfg.model;
        let old_z = self.state.field.z[cell];
        let mut delta = model.gmrf_kappa * (new_z * new_z - old_z * old_z);
        for nb in self.state.field.neighbours(cell) {
            let zn = self.state.field.z[nb];
            delta += (new_z - zn).powi(2) - (old_z - zn).powi(2);
        }
        -0.5 * model.gmrf_tau * delta
    }

    /// Sitewise random-walk update of the latent field given everything
    /// else; identical in both samplers.
    fn update_field(&mut self) -> Result<()> {
        let model = self.cfg.model.clone();
        let cells = self.state.field.cells();
        let lambda_max = self.state.theta.iter().copied().fold(f64::MIN, f64::max);
        let nu = model.nu;
        for cell in 0..cells {
            self.z_proposals += 1;
            let old_z = self.state.field.z[cell];
            let noise: f64 = rand_distr::StandardNormal.sample(&mut self.z_stream);
            let new_z = old_z + self.z_step * noise;
            let mut log_ratio = self.gmrf_delta(cell, new_z);
            let old_level = self.state.level[cell];
            let new_level = model.level_of(new_z);
            if old_level != new_level {
                let (t_old, t_new) = (self.state.theta[old_level], self.state.theta[new_level]);
                log_ratio += self.state.y_count[cell] as f64 * (t_new / t_old).ln();
                log_ratio += self.state.psi.count_per_cell[cell] as f64
                    * ((nu * lambda_max - t_new) / (nu * lambda_max - t_old)).ln();
            }
            if log_ratio >= 0.0 || self.z_stream.uniform() < log_ratio.exp() {
                self.z_accepts += 1;
                self.state.field.z[cell] = new_z;
                if old_level != new_level {
                    self.state.level[cell] = new_level;
                    self.state.level_cells[old_level] -= 1;
                    self.state.level_cells[new_level] += 1;
                    self.state.level_y[old_level] -= self.state.y_count[cell] as u64;
                    self.state.level_y[new_level] += self.state.y_count[cell] as u64;
                    let psi = self.state.psi.count_per_cell[cell] as u64;
                    self.state.level_psi[old_level] -= psi;
                    self.state.level_psi[new_level] += psi;
                }
            }
        }
        self.ledger.record_aux_work(cells as u64);
        Ok(())
    }

    /// Independence update of the auxiliary process. The proposal is its
    /// full conditional — a Poisson process with rate
    /// `nu lambda_max - theta_l` on each level set — so the Metropolis
    /// ratio is identically one and the move always accepts. (A homogeneous
    /// rate proposal would be valid too, but its acceptance collapses like
    /// `exp(-c sqrt(n))` and freezes the sampler outright at the scales
    /// studied here.)
    fn update_psi_ags(&mut self) -> Result<()> {
        let model = self.cfg.model.clone();
        draw_psi_conditional(&mut self.state, &model, &mut self.psi_stream);
        self.ledger.record_aux_work(self.state.psi.total());
        Ok(())
    }

    /// Random-walk Metropolis update of each intensity given the auxiliary
    /// process; the estimator and the theta-dependent auxiliary density
    /// both enter the ratio.
    fn update_theta_ags(&mut self) -> Result<FlipOutcome> {
        let model = self.cfg.model.clone();
        let area = self.state.field.cells() as f64;
        let mut last = FlipOutcome::Tails;
        for l in 0..model.levels() {
            self.theta_proposals[l] += 1;
            let current = self.state.theta[l];
            let proposal = current
                + self
                    .theta_stream
                    .uniform_in(-self.theta_halfwidth[l], self.theta_halfwidth[l]);
            self.ledger.record_aux_work(model.levels() as u64);
            if !model.in_support(proposal) {
                continue;
            }
            let mut new_theta = self.state.theta.clone();
            new_theta[l] = proposal;
            let log_aux = |theta: &[f64]| -> Result<f64> {
                let est = log_ags_estimator(theta, model.nu, area, &self.state.level_psi)?;
                let rate = aux_rate(theta, model.nu);
                Ok(est + self.state.psi.total() as f64 * rate.ln() - area * rate)
            };
            let mut log_ratio =
                self.state.level_y[l] as f64 * (proposal / current).ln();
            log_ratio += log_aux(&new_theta)? - log_aux(&self.state.theta)?;
            last = FlipOutcome::Tails;
            if log_ratio >= 0.0 || self.theta_stream.uniform() < log_ratio.exp() {
                self.theta_accepts[l] += 1;
                self.state.theta = new_theta;
                last = FlipOutcome::Heads;
            }
        }
        Ok(last)
    }

    /// Collapsed intensity update: one Barker step per level over all `n`
    /// unit tiles, with the factor-to-leaf assignment reshuffled per call.
    fn update_theta_cgs(&mut self) -> Result<FlipOutcome> {
        let model = self.cfg.model.clone();
        let n = self.state.field.cells();
        let portkey = PortkeyConfig::with_leaf(1.0 - self.leaf_escape)?;
        let mut last = FlipOutcome::Tails;
        for l in 0..model.levels() {
            self.theta_proposals[l] += 1;
            let tree = self.base_tree.shuffled(&mut self.shuffle_stream);
            let halfwidth = self.theta_halfwidth[l];
            let state = &self.state;
            let step = barker_step(
                state.theta[l],
                |t, stream| t + stream.uniform_in(-halfwidth, halfwidth),
                |theta_l, vartheta_l| {
                    if !model.in_support(vartheta_l) {
                        return Ok(None);
                    }
                    let leaves = tree
                        .batches()
                        .into_iter()
                        .map(|batch| {
                            let pairs = batch
                                .into_iter()
                                .map(|tile| {
                                    let in_level = state.level[tile] == l;
                                    let (pair, form) = cgs_theta_leaf_pair(
                                        if in_level { 1.0 } else { 0.0 },
                                        if in_level { state.y_count[tile] } else { 0 },
                                        in_level,
                                        theta_l,
                                        vartheta_l,
                                    )?;
                                    Ok(oriented(pair, form))
                                })
                                .collect::<Result<Vec<_>>>()?;
                            Ok(DcbfLeaf::direct(FactorPair::product(pairs)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Some(leaves))
                },
                &portkey,
                &self.cfg.opts,
                &mut self.theta_stream,
                &mut self.ledger,
            )?;
            self.ledger.record_aux_work(n as u64);
            match step.outcome {
                FlipOutcome::Heads => {
                    self.theta_accepts[l] += 1;
                    self.state.theta[l] = step.next;
                }
                FlipOutcome::Escaped => self.theta_escapes[l] += 1,
                FlipOutcome::Tails => {}
            }
            last = step.outcome;
        }
        Ok(last)
    }

    /// One sweep. AGS: auxiliary process, field, intensities, all
    /// conditioned on each other. CGS: field given the auxiliary process,
    /// collapsed intensity updates, then an exact redraw of the auxiliary
    /// process from its full conditional (required for the partially
    /// collapsed sweep to leave the joint posterior invariant).
    pub fn sweep(&mut self) -> Result<FlipOutcome> {
        match self.cfg.kind {
            CoxSamplerKind::Ags => {
                self.update_psi_ags()?;
                if !self.cfg.fix_field {
                    self.update_field()?;
                }
                // The outcome column reports the last intensity block's
                // accept/reject decision.
                self.update_theta_ags()
            }
            CoxSamplerKind::Cgs => {
                if !self.cfg.fix_field {
                    self.update_field()?;
                }
                let outcome = self.update_theta_cgs()?;
                let model = self.cfg.model.clone();
                draw_psi_conditional(&mut self.state, &model, &mut self.psi_stream);
                self.ledger.record_aux_work(self.state.psi.total());
                Ok(outcome)
            }
        }
    }

    /// Adaptation pass: tunes the field step towards 44% acceptance, the
    /// intensity proposal widths towards their targets (44% for the AGS
    /// random walk, 30% for the Barker update), and the CGS leaf escape
    /// probability towards the configured escape fraction. Runs strictly
    /// before the recorded chain; call [`CoxSampler::reset_counters`]
    /// afterwards.
    pub fn adapt(&mut self) -> Result<()> {
        let batches = (self.cfg.adapt_iters / 50).max(1);
        for _ in 0..batches {
            self.zero_batch_stats();
            for _ in 0..50 {
                self.sweep()?;
            }
            let z_acc = self.z_accepts as f64 / self.z_proposals.max(1) as f64;
            self.z_step = (self.z_step * ((z_acc - 0.44) * 2.0).exp()).clamp(1e-3, 10.0);
            let theta_target = match self.cfg.kind {
                CoxSamplerKind::Ags => 0.44,
                CoxSamplerKind::Cgs => 0.30,
            };
            for l in 0..self.theta_halfwidth.len() {
                let acc = self.theta_accepts[l] as f64 / self.theta_proposals[l].max(1) as f64;
                self.theta_halfwidth[l] =
                    (self.theta_halfwidth[l] * ((acc - theta_target) * 2.0).exp())
                        .clamp(1e-4, self.cfg.model.prior_hi);
            }
            if self.cfg.kind == CoxSamplerKind::Cgs {
                let flips: u64 = self.theta_proposals.iter().sum();
                let escapes: u64 = self.theta_escapes.iter().sum();
                let observed = escapes as f64 / flips.max(1) as f64;
                let scale = (self.cfg.target_escape / observed.max(5e-3)).clamp(0.3, 3.0);
                self.leaf_escape = (self.leaf_escape * scale).clamp(1e-6, 0.9);
            }
        }
        self.zero_batch_stats();
        Ok(())
    }

    fn zero_batch_stats(&mut self) {
        self.z_proposals = 0;
        self.z_accepts = 0;
        for v in [
            &mut self.theta_proposals,
            &mut self.theta_accepts,
            &mut self.theta_escapes,
        ] {
            v.iter_mut().for_each(|c| *c = 0);
        }
    }

    /// Clears cost counters after adaptation so the recorded trace starts
    /// from a clean ledger.
    pub fn reset_counters(&mut self) {
        self.ledger.reset();
        self.zero_batch_stats();
    }

    pub fn escape_fraction(&self) -> f64 {
        let flips: u64 = self.theta_proposals.iter().sum();
        if flips == 0 {
            return 0.0;
        }
        self.theta_escapes.iter().sum::<u64>() as f64 / flips as f64
    }
}

/// Exact draw of the auxiliary process from its full conditional: a Poisson
/// process with rate `nu lambda_max - theta_l` on each level set.
fn draw_psi_conditional(state: &mut CoxState, model: &LevelSetModel, stream: &mut RandomStream) {
    let lambda_max = state.theta.iter().copied().fold(f64::MIN, f64::max);
    let levels = state.level_psi.len();
    let mut per_level = vec![0u64; levels];
    for cell in 0..state.field.cells() {
        let l = state.level[cell];
        let count = poisson_count(model.nu * lambda_max - state.theta[l], stream) as u32;
        state.psi.count_per_cell[cell] = count;
        per_level[l] += count as u64;
    }
    state.level_psi = per_level;
}

/// A finished run: the recorded trace plus the sampler (for field
/// checkpoints and adaptation diagnostics).
pub struct CoxRun {
    pub trace: ChainTrace,
    pub sampler: CoxSampler,
}

/// Runs adaptation followed by the recorded chain; the trace holds one row
/// per kept sweep with all intensities.
pub fn run_cox_chain(dataset: &CoxDataset, cfg: CoxConfig, chain: &ChainConfig) -> Result<CoxRun> {
    chain.validate()?;
    let levels = cfg.model.levels();
    let mut sampler = CoxSampler::new(dataset, cfg, chain.seed)?;
    sampler.adapt()?;
    sampler.reset_counters();
    let mut trace = ChainTrace::new(levels);
    let mut recorded = 0u64;
    for iter in 0..chain.iterations {
        let before = (
            sampler.ledger.leaf_output_total(),
            sampler.ledger.leaf_loop_total(),
            sampler.ledger.merge_loop_total(),
        );
        let outcome = sampler.sweep()?;
        if iter < chain.burn_in || (iter - chain.burn_in) % chain.thin != 0 {
            continue;
        }
        recorded += 1;
        trace.rows.push(TraceRow {
            iter: recorded,
            params: sampler.state.theta.clone(),
            outcome,
            leaf_outputs: sampler.ledger.leaf_output_total() - before.0,
            leaf_loops: sampler.ledger.leaf_loop_total() - before.1,
            merge_loops: sampler.ledger.merge_loop_total() - before.2,
            time_ns: sampler.ledger.work_units(),
        });
    }
    Ok(CoxRun { trace, sampler })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sets_partition_the_square() {
        let model = LevelSetModel::experiment();
        assert_eq!(model.levels(), 2);
        assert_eq!(model.level_of(-0.3), 0);
        assert_eq!(model.level_of(0.0), 1);
        assert_eq!(model.level_of(2.0), 1);
        let multi = LevelSetModel {
            thresholds: vec![-1.0, 1.0],
            ..LevelSetModel::experiment()
        };
        assert_eq!(multi.levels(), 3);
        assert_eq!(multi.level_of(-2.0), 0);
        assert_eq!(multi.level_of(0.0), 1);
        assert_eq!(multi.level_of(1.0), 2);
    }

    #[test]
    fn homogeneous_split_is_plain_poisson() {
        let mut stream = RandomStream::new(1, 0);
        let side = 8;
        let c = 0.9;
        let reps = 1_000;
        let mut total = 0u64;
        for _ in 0..reps {
            let (data, _) = simulate_lscp(c, c, side, &mut stream).unwrap();
            total += data.points.len() as u64;
        }
        let mean = total as f64 / reps as f64;
        let expect = c * (side * side) as f64;
        let tol = 3.0 * (expect / reps as f64).sqrt();
        assert!((mean - expect).abs() < tol, "{mean} vs {expect}");
    }

    #[test]
    fn experiment_count_matches_area() {
        // theta = (1/3, 5/3) on equal halves: expected |y| = side^2.
        let mut stream = RandomStream::new(2, 0);
        let side = 16;
        let reps = 1_000;
        let mut total = 0u64;
        for _ in 0..reps {
            let (data, _) = simulate_lscp(1.0 / 3.0, 5.0 / 3.0, side, &mut stream).unwrap();
            total += data.points.len() as u64;
        }
        let mean = total as f64 / reps as f64;
        let expect = (side * side) as f64;
        let tol = 3.0 * (expect / reps as f64).sqrt();
        assert!((mean - expect).abs() < tol, "{mean} vs {expect}");
    }

    #[test]
    fn estimator_degenerate_cases() {
        // Constant intensity: exact value regardless of the counts.
        let est = ags_estimator(&[0.7, 0.7], 5.0, 9.0, &[13, 2]).unwrap();
        assert!((est - (-9.0 * 0.7f64).exp()).abs() < 1e-12);
        // Empty auxiliary process: only the floor term survives.
        let est = ags_estimator(&[1.0 / 3.0, 5.0 / 3.0], 5.0, 4.0, &[0, 0]).unwrap();
        assert!((est - (-4.0 / 3.0f64).exp()).abs() < 1e-12);
        assert!(ags_estimator(&[1.0], 5.0, 1.0, &[0, 0]).is_err());
    }

    #[test]
    fn estimator_unbiased_under_aux_law() {
        let theta = [1.0 / 3.0, 5.0 / 3.0];
        let nu = 5.0;
        let areas = [10.0, 6.0];
        let area: f64 = areas.iter().sum();
        let rate = aux_rate(&theta, nu);
        let mut stream = RandomStream::new(3, 0);
        let reps = 100_000;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for _ in 0..reps {
            let counts = [
                poisson_count(rate * areas[0], &mut stream),
                poisson_count(rate * areas[1], &mut stream),
            ];
            let est = ags_estimator(&theta, nu, area, &counts).unwrap();
            sum += est;
            sum2 += est * est;
        }
        let mean = sum / reps as f64;
        let target = (-(theta[0] * areas[0] + theta[1] * areas[1])).exp();
        let sd = (sum2 / reps as f64 - mean * mean).sqrt();
        let tol = 3.0 * sd / (reps as f64).sqrt();
        assert!((mean - target).abs() < tol, "{mean} vs {target} +/- {tol}");
    }

    #[test]
    fn leaf_pair_certain_at_equal_intensities() {
        let mut stream = RandomStream::new(4, 0);
        let mut ledger = CostLedger::new();
        for centroid_in in [true, false] {
            let (mut pair, form) =
                cgs_theta_leaf_pair(1.0, 3, centroid_in, 0.8, 0.8).unwrap();
            let out = match form {
                TwoCoinForm::Direct => {
                    crate::factories::flip_two_coin(&mut pair, 1.0, &mut stream, &mut ledger)
                }
                TwoCoinForm::Flipped => crate::factories::flip_two_coin_flipped(
                    &mut pair,
                    1.0,
                    &mut stream,
                    &mut ledger,
                ),
            }
            .unwrap();
            assert_ne!(out, FlipOutcome::Escaped);
        }
        // Equal intensities: zero gap, so no Poisson work at all.
        assert_eq!(ledger.path_evals(), 0);
    }

    #[test]
    fn leaf_pair_fully_inside_matches_closed_form() {
        // Tile inside the level set, vartheta > theta: the flipped pair's
        // heads rate is (v^y e^-v) / (v^y e^-v + t^y e^-t).
        let (theta, vartheta, y) = (1.0, 2.0, 3u32);
        let h = |t: f64| t.powi(y as i32) * (-t).exp();
        let target = h(vartheta) / (h(vartheta) + h(theta));
        let mut stream = RandomStream::new(5, 0);
        let mut ledger = CostLedger::new();
        let reps = 50_000;
        let mut heads = 0u64;
        for _ in 0..reps {
            let (mut pair, form) = cgs_theta_leaf_pair(1.0, y, true, theta, vartheta).unwrap();
            assert_eq!(form, TwoCoinForm::Flipped);
            if crate::factories::flip_two_coin_flipped(&mut pair, 1.0, &mut stream, &mut ledger)
                .unwrap()
                .is_heads()
            {
                heads += 1;
            }
        }
        let rate = heads as f64 / reps as f64;
        let tol = 3.0 * (target * (1.0 - target) / reps as f64).sqrt();
        assert!((rate - target).abs() < tol, "{rate} vs {target}");
        // Fully inside: the complement region is empty, so no path evals.
        assert_eq!(ledger.path_evals(), 0);
    }

    #[test]
    fn leaf_pair_direct_boundary_tile_closed_form() {
        // Tile overlapping the level set on area 1 with centroid outside:
        // direct form, q = exp(-(vartheta - theta)^+ * area).
        let (theta, vartheta) = (0.5, 1.5);
        let h = |t: f64| (-t).exp(); // y = 0, area 1
        let target = h(vartheta) / (h(vartheta) + h(theta));
        let mut stream = RandomStream::new(6, 0);
        let mut ledger = CostLedger::new();
        let reps = 50_000;
        let mut heads = 0u64;
        for _ in 0..reps {
            let (mut pair, form) = cgs_theta_leaf_pair(1.0, 0, false, theta, vartheta).unwrap();
            assert_eq!(form, TwoCoinForm::Direct);
            if crate::factories::flip_two_coin(&mut pair, 1.0, &mut stream, &mut ledger)
                .unwrap()
                .is_heads()
            {
                heads += 1;
            }
        }
        let rate = heads as f64 / reps as f64;
        let tol = 3.0 * (target * (1.0 - target) / reps as f64).sqrt();
        assert!((rate - target).abs() < tol, "{rate} vs {target}");
        assert!(ledger.path_evals() > 0);
    }

    #[test]
    fn dataset_and_field_round_trips() {
        let mut stream = RandomStream::new(7, 0);
        let (data, field) = simulate_lscp(0.5, 1.5, 4, &mut stream).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let parsed = CoxDataset::read_csv(&buf[..], 4).unwrap();
        assert_eq!(parsed, data);
        let mut geo = Vec::new();
        data.write_geometry(&mut geo).unwrap();
        assert_eq!(CoxDataset::read_geometry(&geo[..]).unwrap(), 4);
        let mut fbuf = Vec::new();
        field.write_csv(&mut fbuf).unwrap();
        assert_eq!(LatentField::read_csv(&fbuf[..]).unwrap(), field);
    }

    #[test]
    fn state_caches_are_consistent() {
        let mut stream = RandomStream::new(8, 0);
        let (data, field) = simulate_lscp(1.0 / 3.0, 5.0 / 3.0, 8, &mut stream).unwrap();
        let model = LevelSetModel::experiment();
        let state = CoxState::new(&model, &data, field, vec![0.5, 1.5]).unwrap();
        assert_eq!(state.level_areas(), vec![32.0, 32.0]);
        assert_eq!(
            state.level_y_counts().iter().sum::<u64>() as usize,
            data.points.len()
        );
    }
}
