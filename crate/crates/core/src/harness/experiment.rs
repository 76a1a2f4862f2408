//! Seeded training runs with periodic evaluation.
//!
//! Each seed owns its own [`Trainer`]; seeds run on the rayon pool and hand
//! back immutable timelines that a single writer turns into CSV files.
//!
//! Per seed, the generator streams are: `Data` for the dataset, `Init` for
//! weights, `Train` for minibatches and diffusion draws, and fresh `Eval`,
//! `Accuracy` and `EvalLoss` streams at every evaluation. Evaluation therefore
//! never perturbs training, and a resumed run replays the same draws.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng as _;
use rayon::prelude::*;

use crate::bandit::{generate_dataset, BanditDataset, BanditSpec, BoxKind, Point};
use crate::checkpoint::Checkpoint;
use crate::critic::{CriticEnsemble, Transitions};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::mdp::reward;
use crate::metrics::{grouped_chamfer, quadrant_accuracy, ChamferReport};
use crate::nn::{adam_step, AdamConfig, AdamState};
use crate::policy::{Batch, BcLoss, LossDraws, SrdpPolicy};
use crate::rng::{stream_rng, Rng, RngPosition, Stream};

/// One evaluation of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub iteration: u64,
    pub seed: u64,
    pub report: ChamferReport,
    pub loss: BcLoss,
    pub quadrant_accuracy: f64,
}

#[derive(Debug, Clone)]
struct CriticState {
    ensemble: CriticEnsemble,
    adam_q1: AdamState,
    adam_q2: AdamState,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: ExperimentConfig,
    spec: BanditSpec,
    seed: u64,
    states: Array2<f64>,
    actions: Array2<f64>,
    policy: SrdpPolicy,
    adam: AdamState,
    critic: Option<CriticState>,
    iteration: u64,
    rng: Rng,
}

fn matrix(points: &[Point]) -> Array2<f64> {
    Array2::from_shape_vec((points.len(), 2), points.iter().flatten().copied().collect()).expect("point matrix")
}

fn load_dataset(cfg: &ExperimentConfig, spec: &BanditSpec, seed: u64) -> Result<BanditDataset> {
    match &cfg.dataset {
        Some(path) => {
            let data = BanditDataset::read_csv(path)?;
            if data.meta.spec_hash != spec.hash() {
                return Err(Error::Config(format!(
                    "dataset {} was generated for spec {}, config resolves to {}",
                    path.display(),
                    data.meta.spec_hash,
                    spec.hash()
                )));
            }
            Ok(data)
        }
        None => generate_dataset(spec, cfg.n_train, BoxKind::Train, seed, &mut stream_rng(seed, Stream::Data)),
    }
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.bandit();
        let data = load_dataset(cfg, &spec, seed)?;
        let mut init = stream_rng(seed, Stream::Init);
        let policy = SrdpPolicy::new(cfg.policy_config()?, &mut init)?;
        let adam = AdamState::new(cfg.adam, policy.num_params());
        let critic = if cfg.critic {
            let ensemble = CriticEnsemble::new(cfg.critic_config(), &policy, &mut init)?;
            let critic_adam = AdamConfig { lr: cfg.critic_lr, ..cfg.adam };
            Some(CriticState {
                adam_q1: AdamState::new(critic_adam, ensemble.q1.num_params()),
                adam_q2: AdamState::new(critic_adam, ensemble.q2.num_params()),
                ensemble,
            })
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            seed,
            states: matrix(&data.states),
            actions: matrix(&data.actions),
            policy,
            adam,
            critic,
            iteration: 0,
            rng: stream_rng(seed, Stream::Train),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> &SrdpPolicy {
        &self.policy
    }

    pub fn spec(&self) -> &BanditSpec {
        &self.spec
    }

    fn minibatch(&self, idx: &[usize]) -> Batch {
        let states = self.states.select(ndarray::Axis(0), idx);
        let actions = self.actions.select(ndarray::Axis(0), idx);
        Batch { states, actions }
    }

    /// One optimizer step. Returns the training-batch losses.
    pub fn step(&mut self) -> Result<BcLoss> {
        let n = self.states.nrows();
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.rng.random_range(0..n)).collect();
        let batch = self.minibatch(&idx);
        let (loss, grads) = match &mut self.critic {
            None => {
                let draws = LossDraws::sample(batch.len(), 2, self.policy.schedule().steps(), &mut self.rng);
                self.policy.bc_loss_grads(&batch, &draws)?
            }
            Some(c) => {
                let rewards: Array1<f64> =
                    batch.actions.rows().into_iter().map(|a| reward(&self.spec, [a[0], a[1]])).collect();
                let trans = Transitions {
                    states: batch.states.clone(),
                    actions: batch.actions.clone(),
                    rewards,
                    next_states: batch.states.clone(),
                    dones: Array1::ones(batch.len()),
                };
                let next = c.ensemble.next_actions(&trans, &mut self.rng)?;
                let (bellman, g1, g2, _) = c.ensemble.bellman_loss_grads(&trans, next.view())?;
                if !bellman.is_finite() {
                    return Err(Error::Numeric(format!("bellman loss {bellman} at iteration {}", self.iteration)));
                }
                adam_step(&mut c.ensemble.q1, &g1, &mut c.adam_q1)?;
                adam_step(&mut c.ensemble.q2, &g2, &mut c.adam_q2)?;
                let draws = LossDraws::sample(batch.len(), 2, self.policy.schedule().steps(), &mut self.rng);
                let (l, g) = c.ensemble.srdp_total_loss_grads(&self.policy, &batch, &draws, &mut self.rng)?;
                if !l.total.is_finite() {
                    return Err(Error::Numeric(format!("policy loss {} at iteration {}", l.total, self.iteration)));
                }
                (l.bc, g)
            }
        };
        if !loss.l_bc.is_finite() {
            return Err(Error::Numeric(format!("L_BC = {} at iteration {}", loss.l_bc, self.iteration)));
        }
        let mut params = self.policy.params_flat();
        self.adam.config.lr = self.cfg.lr_at(self.iteration);
        self.adam.step(&mut params, &grads.flat())?;
        self.policy.set_params_flat(&params)?;
        if let Some(c) = &mut self.critic {
            c.ensemble.polyak_update(&self.policy)?;
        }
        self.iteration += 1;
        Ok(loss)
    }

    pub fn train_until(&mut self, iteration: u64) -> Result<()> {
        while self.iteration < iteration {
            self.step()?;
        }
        Ok(())
    }

    /// Grouped Chamfer, held-out style losses on a fixed dataset sample, and
    /// quadrant accuracy. Depends only on the current parameters and the seed.
    pub fn evaluate(&self) -> Result<EvalRow> {
        let cfg = &self.cfg;
        let report = grouped_chamfer(&self.policy, &self.spec, cfg.n_eval, cfg.m_ref, cfg.grouping, self.seed)?;
        let mut loss_rng = stream_rng(self.seed, Stream::EvalLoss);
        let n = self.states.nrows();
        let idx: Vec<usize> = (0..cfg.n_loss_eval).map(|_| loss_rng.random_range(0..n)).collect();
        let loss = self.policy.bc_loss(&self.minibatch(&idx), &mut loss_rng)?;
        let acc = quadrant_accuracy(&self.policy, &self.spec, cfg.n_accuracy, &mut stream_rng(self.seed, Stream::Accuracy))?;
        let row = EvalRow { iteration: self.iteration, seed: self.seed, report, loss, quadrant_accuracy: acc };
        if !row_is_finite(&row) {
            return Err(Error::Numeric(format!("non-finite evaluation at iteration {}", self.iteration)));
        }
        Ok(row)
    }

    /// Full training state: parameters, optimizer moments, critics and the
    /// training generator position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("iteration", self.iteration);
        ck.set_meta("seed", self.seed);
        ck.set_meta("spec_hash", self.spec.hash());
        ck.set_policy("policy", &self.policy);
        ck.set_adam("policy_adam", &self.adam);
        ck.set_rng("train", RngPosition::capture(self.seed, &self.rng));
        if let Some(c) = &self.critic {
            ck.set_net("q1", &c.ensemble.q1);
            ck.set_net("q2", &c.ensemble.q2);
            ck.set_net("q1_target", &c.ensemble.q1_target);
            ck.set_net("q2_target", &c.ensemble.q2_target);
            ck.set_policy("policy_target", &c.ensemble.policy_target);
            ck.set_adam("q1_adam", &c.adam_q1);
            ck.set_adam("q2_adam", &c.adam_q2);
        }
        ck
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`]
    /// under the same config.
    pub fn resume(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<Self> {
        let seed: u64 = ck.meta_parse("seed")?;
        let mut t = Self::new(cfg, seed)?;
        if ck.meta("spec_hash")? != t.spec.hash() {
            return Err(Error::Config("checkpoint was written for a different bandit spec".into()));
        }
        let policy = ck.policy("policy")?;
        if policy.num_params() != t.policy.num_params() || policy.variant() != t.policy.variant() {
            return Err(Error::Config("checkpoint policy does not match the config".into()));
        }
        t.policy = policy;
        t.adam = ck.adam("policy_adam")?.clone();
        t.rng = ck.rng("train")?.restore();
        t.iteration = ck.meta_parse("iteration")?;
        match &mut t.critic {
            Some(c) => {
                c.ensemble.q1 = ck.net("q1")?.clone();
                c.ensemble.q2 = ck.net("q2")?.clone();
                c.ensemble.q1_target = ck.net("q1_target")?.clone();
                c.ensemble.q2_target = ck.net("q2_target")?.clone();
                c.ensemble.policy_target = ck.policy("policy_target")?;
                c.adam_q1 = ck.adam("q1_adam")?.clone();
                c.adam_q2 = ck.adam("q2_adam")?.clone();
            }
            None if ck.has_net("q1") => {
                return Err(Error::Config("checkpoint has critics but the config turns them off".into()));
            }
            None => {}
        }
        Ok(t)
    }
}

fn row_is_finite(row: &EvalRow) -> bool {
    row.report.total.is_finite()
        && row.report.per_group.iter().all(|(_, d)| d.is_finite())
        && row.loss.l_dp.is_finite()
        && row.loss.l_bc.is_finite()
        && row.loss.l_r.is_none_or(f64::is_finite)
        && row.quadrant_accuracy.is_finite()
}

/// Encodes evaluation rows into checkpoint floats so a resumed run can
/// reproduce the full timeline.
fn store_rows(ck: &mut Checkpoint, rows: &[EvalRow]) {
    ck.set_meta("rows", rows.len());
    for (k, r) in rows.iter().enumerate() {
        let mut v: Vec<f64> = vec![r.iteration as f64];
        v.extend(r.report.per_group.iter().map(|(_, d)| *d));
        v.extend([r.loss.l_dp, r.loss.l_r.unwrap_or(f64::NAN), r.loss.l_bc, r.quadrant_accuracy]);
        ck.set_floats(&format!("row{k}"), &v);
    }
}

fn load_rows(ck: &Checkpoint, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<EvalRow>> {
    let labels = match cfg.grouping {
        crate::metrics::Grouping::Quadrant => vec!["q1", "q2", "q3", "q4"],
        crate::metrics::Grouping::ModePair => vec!["pair_a", "pair_b"],
    };
    let count: usize = ck.meta_parse("rows")?;
    let mut rows = Vec::with_capacity(count);
    for k in 0..count {
        let v = ck.floats(&format!("row{k}"))?;
        if v.len() != labels.len() + 5 {
            return Err(Error::Parse(format!("stored row {k} has {} values", v.len())));
        }
        let per_group: Vec<(String, f64)> = labels.iter().zip(&v[1..]).map(|(l, d)| (l.to_string(), *d)).collect();
        let g = labels.len() + 1;
        let report = ChamferReport {
            total: per_group.iter().map(|(_, d)| d).sum(),
            per_group,
            n_eval_states: cfg.n_eval,
            m_reference: cfg.m_ref,
            seed,
        };
        let l_r = if v[g + 1].is_nan() { None } else { Some(v[g + 1]) };
        rows.push(EvalRow {
            iteration: v[0] as u64,
            seed,
            report,
            loss: BcLoss { l_dp: v[g], l_r, l_bc: v[g + 2] },
            quadrant_accuracy: v[g + 3],
        });
    }
    Ok(rows)
}

/// Outcome of one seed. `error` is set when the seed aborted; its rows are
/// then left out of every aggregate.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub timings: Vec<(u64, f64)>,
    pub error: Option<String>,
}

pub fn checkpoint_path(dir: &Path, seed: u64, iteration: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("seed{seed}_iter{iteration}.ckpt"))
}

/// Latest checkpoint for `seed` under `dir`, if any.
pub fn latest_checkpoint(dir: &Path, seed: u64) -> Option<PathBuf> {
    let prefix = format!("seed{seed}_iter");
    let entries = std::fs::read_dir(dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let iter: u64 = name.strip_prefix(&prefix)?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((iter, e.path()))
        })
        .max_by_key(|(i, _)| *i)
        .map(|(_, p)| p)
}

fn run_seed_inner(cfg: &ExperimentConfig, seed: u64, resume: bool, run: &mut SeedRun) -> Result<()> {
    let start = Instant::now();
    let mut trainer = match resume.then(|| latest_checkpoint(&cfg.output_dir, seed)).flatten() {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            run.rows = load_rows(&ck, cfg, seed)?;
            Trainer::resume(cfg, &ck)?
        }
        None => Trainer::new(cfg, seed)?,
    };
    if run.rows.is_empty() {
        run.rows.push(trainer.evaluate()?);
        run.timings.push((0, start.elapsed().as_secs_f64()));
    }
    let save = |trainer: &Trainer, rows: &[EvalRow]| -> Result<()> {
        if cfg.checkpoints {
            let mut ck = trainer.checkpoint();
            store_rows(&mut ck, rows);
            let path = checkpoint_path(&cfg.output_dir, seed, trainer.iteration());
            std::fs::create_dir_all(path.parent().expect("checkpoint dir"))?;
            ck.save(&path)?;
        }
        Ok(())
    };
    if trainer.iteration() == 0 {
        save(&trainer, &run.rows)?;
    }
    while trainer.iteration() < cfg.iterations {
        let next = (trainer.iteration() / cfg.eval_interval + 1) * cfg.eval_interval;
        trainer.train_until(next)?;
        run.rows.push(trainer.evaluate()?);
        run.timings.push((next, start.elapsed().as_secs_f64()));
        save(&trainer, &run.rows)?;
    }
    Ok(())
}

/// Trains and evaluates one seed. Failures are captured, not propagated.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, resume: bool) -> SeedRun {
    let mut run = SeedRun { seed, rows: Vec::new(), timings: Vec::new(), error: None };
    if let Err(e) = run_seed_inner(cfg, seed, resume, &mut run) {
        run.error = Some(e.to_string());
    }
    run
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub runs: Vec<SeedRun>,
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
}

impl ExperimentOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.runs.iter().all(|r| r.error.is_none())
    }

    pub fn succeeded(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter(|r| r.error.is_none())
    }
}

fn float(v: f64) -> String {
    format!("{v}")
}

/// Results CSV: provenance comments, then one row per (seed, iteration,
/// group) plus a `total` row.
pub fn results_csv(cfg: &ExperimentConfig, runs: &[SeedRun]) -> String {
    let spec = cfg.bandit();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# schedule kind={} steps={} beta_min={} beta_max={}",
        cfg.schedule_kind.name(),
        cfg.diffusion_steps,
        cfg.beta_min,
        cfg.beta_max
    );
    let _ = writeln!(
        s,
        "# env={} spec_hash={} grouping={} n_eval={} m_ref={}",
        spec.name,
        spec.hash(),
        cfg.grouping.name(),
        cfg.n_eval,
        cfg.m_ref
    );
    s.push_str("iter,seed,lambda,variant,group,chamfer,l_dp,l_r,l_bc,quadrant_accuracy\n");
    let lambda = float(cfg.variant.lambda());
    let variant = cfg.variant.name();
    for run in runs.iter().filter(|r| r.error.is_none()) {
        for row in &run.rows {
            let l_r = row.loss.l_r.map(float).unwrap_or_default();
            let tail = format!(
                "{},{},{},{}",
                float(row.loss.l_dp),
                l_r,
                float(row.loss.l_bc),
                float(row.quadrant_accuracy)
            );
            let groups = row.report.per_group.iter().map(|(g, d)| (g.as_str(), *d));
            for (g, d) in groups.chain([("total", row.report.total)]) {
                let _ = writeln!(s, "{},{},{lambda},{variant},{g},{},{tail}", row.iteration, run.seed, float(d));
            }
        }
    }
    s
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population standard deviation across successful seeds, per
/// iteration and group.
pub fn summary_csv(cfg: &ExperimentConfig, runs: &[SeedRun]) -> String {
    let mut cells: BTreeMap<(u64, usize), (String, Vec<f64>)> = BTreeMap::new();
    for run in runs.iter().filter(|r| r.error.is_none()) {
        for row in &run.rows {
            let groups = row.report.per_group.iter().map(|(g, d)| (g.clone(), *d));
            for (k, (g, d)) in groups.chain([("total".to_string(), row.report.total)]).enumerate() {
                cells.entry((row.iteration, k)).or_insert_with(|| (g, Vec::new())).1.push(d);
            }
        }
    }
    let mut s = String::from("iter,lambda,variant,group,mean,std,n_seeds\n");
    for ((iter, _), (g, values)) in &cells {
        let (m, sd) = mean_std(values);
        let _ = writeln!(
            s,
            "{iter},{},{},{g},{},{},{}",
            float(cfg.variant.lambda()),
            cfg.variant.name(),
            float(m),
            float(sd),
            values.len()
        );
    }
    s
}

fn timings_csv(runs: &[SeedRun]) -> String {
    let mut s = String::from("seed,iter,seconds\n");
    for run in runs {
        for (iter, secs) in &run.timings {
            let _ = writeln!(s, "{},{iter},{secs:.3}", run.seed);
        }
    }
    s
}

/// Runs every seed of the config, writes `results.csv`, `summary.csv`,
/// `timings.csv`, `config.resolved` and (if any seed failed) `failures.txt`
/// into the output directory. With `resume`, each seed continues from its
/// latest checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.resolved())?;
    let mut runs: Vec<SeedRun> = cfg.seeds.par_iter().map(|&seed| run_seed(cfg, seed, resume)).collect();
    runs.sort_by_key(|r| r.seed);
    let results_path = dir.join("results.csv");
    let summary_path = dir.join("summary.csv");
    std::fs::write(&results_path, results_csv(cfg, &runs))?;
    std::fs::write(&summary_path, summary_csv(cfg, &runs))?;
    std::fs::write(dir.join("timings.csv"), timings_csv(&runs))?;
    let failures: String = runs
        .iter()
        .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}\n", r.seed)))
        .collect();
    let fail_path = dir.join("failures.txt");
    if failures.is_empty() {
        if fail_path.exists() {
            std::fs::remove_file(&fail_path)?;
        }
    } else {
        std::fs::write(&fail_path, failures)?;
    }
    Ok(ExperimentOutcome { runs, results_csv: results_path, summary_csv: summary_path })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        for kv in ["iterations=6", "eval_interval=3", "batch_size=16", "n_train=64", "n_eval=40", "m_ref=2"] {
            cfg.set_pair(kv).unwrap();
        }
        cfg.set_pair("n_accuracy=20").unwrap();
        cfg.set_pair("n_loss_eval=32").unwrap();
        cfg.seeds = vec![1, 2];
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn zero_iterations_gives_only_the_untrained_row() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.iterations = 0;
        let out = run_experiment(&cfg, false).unwrap();
        assert!(out.all_succeeded());
        for run in &out.runs {
            assert_eq!(run.rows.len(), 1);
            assert_eq!(run.rows[0].iteration, 0);
        }
    }

    #[test]
    fn timeline_is_increasing_and_summary_recomputes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let out = run_experiment(&cfg, false).unwrap();
        assert!(out.all_succeeded());
        for run in &out.runs {
            let iters: Vec<u64> = run.rows.iter().map(|r| r.iteration).collect();
            assert_eq!(iters, vec![0, 3, 6]);
        }
        let totals: Vec<f64> = out.runs.iter().map(|r| r.rows[2].report.total).collect();
        let (m, sd) = mean_std(&totals);
        let summary = std::fs::read_to_string(&out.summary_csv).unwrap();
        let line = summary.lines().find(|l| l.starts_with("6,") && l.contains(",total,")).unwrap();
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4].parse::<f64>().unwrap(), m);
        assert_eq!(f[5].parse::<f64>().unwrap(), sd);
        assert_eq!(f[6], "2");
    }

    #[test]
    fn checkpoint_round_trip_preserves_training() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.critic = true;
        cfg.critic_hidden = vec![8];
        let mut a = Trainer::new(&cfg, 3).unwrap();
        a.train_until(2).unwrap();
        let ck = Checkpoint::parse(&a.checkpoint().to_text()).unwrap();
        let mut b = Trainer::resume(&cfg, &ck).unwrap();
        a.train_until(4).unwrap();
        b.train_until(4).unwrap();
        assert_eq!(a.policy().params_flat(), b.policy().params_flat());
        assert_eq!(a.evaluate().unwrap(), b.evaluate().unwrap());
    }
}
