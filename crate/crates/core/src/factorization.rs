//! Low-rank factorization of a sparse activity matrix.
//!
//! Minimizes, over the known cells only,
//!
//! ```text
//! Σ (s − u·t)² + λ (‖u‖² + ‖t‖²)
//! ```
//!
//! where the penalty is charged once per known cell touching a factor
//! vector, matching the per-cell SGD update
//! `u ← u + η(e·t − λu)`, `t ← t + η(e·u − λt)` with `e = s − u·t`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activity::{ActivityMatrix, Entry};
use crate::error::{Error, Result};
use crate::ingest::UserId;
use crate::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rank: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_std: f64,
    /// After the SGD epochs, replace every user vector by the exact
    /// minimizer of the objective given the topic factors.
    pub refine_users: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rank: 10,
            lambda: 0.01,
            learning_rate: 0.005,
            epochs: 50,
            seed: 0,
            init_std: 0.1,
            refine_users: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_std: f64,
    pub train_rmse: f64,
    /// Objective after each epoch.
    pub objective_trace: Vec<f64>,
}

/// User and topic factor matrices, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorModel {
    users: Vec<UserId>,
    num_topics: usize,
    rank: usize,
    lambda: f64,
    user_factors: Vec<f64>,
    topic_factors: Vec<f64>,
    pub meta: TrainMeta,
}

impl FactorModel {
    /// Assembles a model from explicit factors (rows of length `rank`).
    pub fn from_factors(
        users: Vec<UserId>,
        user_factors: Vec<f64>,
        topic_factors: Vec<f64>,
        rank: usize,
        lambda: f64,
    ) -> Result<Self> {
        if rank == 0 || user_factors.len() != users.len() * rank || topic_factors.len() % rank != 0 {
            return Err(Error::InvalidInput("factor dimensions are inconsistent".into()));
        }
        if users.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("user ids must be strictly ascending".into()));
        }
        Ok(FactorModel {
            num_topics: topic_factors.len() / rank,
            users,
            rank,
            lambda,
            user_factors,
            topic_factors,
            meta: TrainMeta {
                epochs: 0,
                learning_rate: 0.0,
                seed: 0,
                init_std: 0.0,
                train_rmse: f64::NAN,
                objective_trace: Vec::new(),
            },
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn user_row(&self, user: UserId) -> Option<usize> {
        self.users.binary_search(&user).ok()
    }

    pub fn user_vector(&self, row: usize) -> &[f64] {
        &self.user_factors[row * self.rank..(row + 1) * self.rank]
    }

    pub fn topic_vector(&self, topic: usize) -> &[f64] {
        &self.topic_factors[topic * self.rank..(topic + 1) * self.rank]
    }

    /// Predicted activity `u_row · t_topic`.
    pub fn predict(&self, row: usize, topic: usize) -> Result<f64> {
        if row >= self.num_users() {
            return Err(Error::OutOfRange(format!("user row {row} >= {}", self.num_users())));
        }
        if topic >= self.num_topics {
            return Err(Error::OutOfRange(format!("topic {topic} >= {}", self.num_topics)));
        }
        Ok(dot(self.user_vector(row), self.topic_vector(topic)))
    }

    /// Multiplies every prediction by `c` (scales the user factors).
    pub fn scale_predictions(&mut self, c: f64) {
        for x in &mut self.user_factors {
            *x *= c;
        }
    }

    pub fn factor_norm_sq(&self) -> f64 {
        self.user_factors.iter().chain(&self.topic_factors).map(|x| x * x).sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared error term and penalty term of the objective, separately.
pub fn objective_parts(entries: &[Entry], model: &FactorModel) -> (f64, f64) {
    let mut err = 0.0;
    let mut pen = 0.0;
    for e in entries {
        let u = model.user_vector(e.row as usize);
        let t = model.topic_vector(e.col as usize);
        let r = e.value - dot(u, t);
        err += r * r;
        pen += dot(u, u) + dot(t, t);
    }
    (err, model.lambda * pen)
}

/// The regularized squared error over the known cells of `m`.
pub fn objective(m: &ActivityMatrix, model: &FactorModel) -> Result<f64> {
    check_dims(m, model)?;
    let (e, p) = objective_parts(m.entries(), model);
    Ok(e + p)
}

fn check_dims(m: &ActivityMatrix, model: &FactorModel) -> Result<()> {
    if m.users() != model.users() || m.num_topics() != model.num_topics() {
        return Err(Error::InvalidInput(format!(
            "model is {}x{}, matrix is {}x{} (or user ids differ)",
            model.num_users(),
            model.num_topics(),
            m.num_users(),
            m.num_topics()
        )));
    }
    Ok(())
}

/// The SGD step direction for one known cell:
/// `(e·t − λu, e·u − λt)`, i.e. minus half the gradient of that cell's term.
pub fn sgd_direction(model: &FactorModel, entry: &Entry) -> (Vec<f64>, Vec<f64>) {
    let u = model.user_vector(entry.row as usize);
    let t = model.topic_vector(entry.col as usize);
    let e = entry.value - dot(u, t);
    let du = u.iter().zip(t).map(|(&uk, &tk)| e * tk - model.lambda * uk).collect();
    let dt = u.iter().zip(t).map(|(&uk, &tk)| e * uk - model.lambda * tk).collect();
    (du, dt)
}

/// Full gradient of [`objective`] with respect to the user and topic
/// factors (row-major, same layout as the model).
pub fn gradient(m: &ActivityMatrix, model: &FactorModel) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(m, model)?;
    let r = model.rank;
    let mut gu = vec![0.0; model.user_factors.len()];
    let mut gt = vec![0.0; model.topic_factors.len()];
    for entry in m.entries() {
        let (du, dt) = sgd_direction(model, entry);
        let (ur, tc) = (entry.row as usize * r, entry.col as usize * r);
        for k in 0..r {
            gu[ur + k] -= 2.0 * du[k];
            gt[tc + k] -= 2.0 * dt[k];
        }
    }
    Ok((gu, gt))
}

fn train_entries(
    entries: &[Entry],
    users: Vec<UserId>,
    num_topics: usize,
    cfg: &TrainConfig,
) -> Result<FactorModel> {
    cfg.validate()?;
    if entries.is_empty() {
        return Err(Error::InvalidInput("cannot factorize a matrix without entries".into()));
    }
    let rank = cfg.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).expect("positive std");
    let user_factors: Vec<f64> = (0..users.len() * rank).map(|_| normal.sample(&mut rng)).collect();
    let topic_factors: Vec<f64> = (0..num_topics * rank).map(|_| normal.sample(&mut rng)).collect();
    let mut model = FactorModel::from_factors(users, user_factors, topic_factors, rank, cfg.lambda)?;
    let (eta, lambda) = (cfg.learning_rate, cfg.lambda);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let entry = &entries[i];
            let (ur, tc) = (entry.row as usize * rank, entry.col as usize * rank);
            let u = &mut model.user_factors[ur..ur + rank];
            let t = &mut model.topic_factors[tc..tc + rank];
            let e = entry.value - dot(u, t);
            for k in 0..rank {
                let (uk, tk) = (u[k], t[k]);
                u[k] += eta * (e * tk - lambda * uk);
                t[k] += eta * (e * uk - lambda * tk);
            }
        }
        let (err, pen) = objective_parts(entries, &model);
        let obj = err + pen;
        if !obj.is_finite() {
            return Err(Error::Diverged { epoch: epoch + 1 });
        }
        trace.push(obj);
    }
    if cfg.refine_users {
        refine_user_factors(entries, &mut model);
    }
    let (err, _) = objective_parts(entries, &model);
    model.meta = TrainMeta {
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        init_std: cfg.init_std,
        train_rmse: (err / entries.len() as f64).sqrt(),
        objective_trace: trace,
    };
    Ok(model)
}

/// Solves `(Σ t tᵀ + λ·n I) u = Σ s t` for each user with `n` known cells.
/// Users whose system is not positive definite keep their SGD vector.
fn refine_user_factors(entries: &[Entry], model: &mut FactorModel) {
    let r = model.rank;
    let mut by_row: Vec<Vec<&Entry>> = vec![Vec::new(); model.num_users()];
    for e in entries {
        by_row[e.row as usize].push(e);
    }
    for (row, cells) in by_row.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let mut a = vec![0.0; r * r];
        let mut b = vec![0.0; r];
        for e in cells {
            let t = model.topic_vector(e.col as usize);
            for i in 0..r {
                b[i] += e.value * t[i];
                for j in 0..r {
                    a[i * r + j] += t[i] * t[j];
                }
            }
        }
        for i in 0..r {
            a[i * r + i] += model.lambda * cells.len() as f64;
        }
        if let Some(u) = cholesky_solve(&mut a, &mut b, r) {
            model.user_factors[row * r..(row + 1) * r].copy_from_slice(u);
        }
    }
}

/// In-place Cholesky solve of a symmetric `n×n` system. Returns `None`
/// when the matrix is not numerically positive definite.
fn cholesky_solve<'a>(a: &mut [f64], b: &'a mut [f64], n: usize) -> Option<&'a [f64]> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-12) {
            return None;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
    }
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * n + k] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut v = b[i];
        for k in i + 1..n {
            v -= a[k * n + i] * b[k];
        }
        b[i] = v / a[i * n + i];
    }
    Some(b)
}

/// Trains a model on the known cells of `m` by SGD. Single-threaded and
/// bitwise deterministic for a fixed configuration.
pub fn factorize(m: &ActivityMatrix, cfg: &TrainConfig) -> Result<FactorModel> {
    cfg.validate()?;
    let max_rank = m.num_users().min(m.num_topics());
    if cfg.rank > max_rank {
        return Err(Error::Config(format!(
            "rank {} exceeds min(users, topics) = {max_rank}",
            cfg.rank
        )));
    }
    train_entries(m.entries(), m.users().to_vec(), m.num_topics(), cfg)
}

/// Fold index for every entry of `m`. Users are visited in shuffled order
/// and each user's entries (also shuffled) are dealt round-robin over the
/// folds, so fold sizes differ by at most one and every user with at least
/// two entries keeps a training entry in every fold.
pub fn fold_assignment(m: &ActivityMatrix, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = m.entries();
    let mut by_row: Vec<Vec<usize>> = vec![Vec::new(); m.num_users()];
    for (i, e) in entries.iter().enumerate() {
        by_row[e.row as usize].push(i);
    }
    let mut rows: Vec<usize> = (0..m.num_users()).collect();
    rows.shuffle(&mut rng);
    let mut fold = vec![0; entries.len()];
    let mut pos = 0usize;
    for r in rows {
        let mut idx = std::mem::take(&mut by_row[r]);
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = pos % k;
            pos += 1;
        }
    }
    fold
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvResult {
    pub best: TrainConfig,
    /// Mean held-out RMSE per grid entry, in grid order.
    pub rmse: Vec<f64>,
}

/// k-fold cross-validation over a configuration grid. Picks the lowest mean
/// held-out RMSE; ties go to the smaller rank, then the smaller λ.
pub fn cross_validate(
    m: &ActivityMatrix,
    grid: &[TrainConfig],
    k: usize,
    seed: u64,
    exec: Exec,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::Config("cross-validation grid is empty".into()));
    }
    if k < 2 {
        return Err(Error::Config("cross-validation needs k >= 2".into()));
    }
    if m.nnz() < k {
        return Err(Error::InvalidInput(format!("{} entries cannot fill {k} folds", m.nnz())));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    let folds = fold_assignment(m, k, seed);
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..k).map(move |f| (g, f))).collect();
    let errors = exec.try_map(&jobs, |&(g, f)| -> Result<f64> {
        let train: Vec<Entry> = m
            .entries()
            .iter()
            .zip(&folds)
            .filter(|(_, &fi)| fi != f)
            .map(|(e, _)| *e)
            .collect();
        let model = train_entries(&train, m.users().to_vec(), m.num_topics(), &grid[g])?;
        let held: Vec<f64> = m
            .entries()
            .iter()
            .zip(&folds)
            .filter(|(_, &fi)| fi == f)
            .map(|(e, _)| {
                let r = e.value - dot(model.user_vector(e.row as usize), model.topic_vector(e.col as usize));
                r * r
            })
            .collect();
        Ok((held.iter().sum::<f64>() / held.len() as f64).sqrt())
    })?;
    let rmse: Vec<f64> = errors.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let (a, b) = (&grid[i], &grid[best]);
        let better = rmse[i]
            .total_cmp(&rmse[best])
            .then(a.rank.cmp(&b.rank))
            .then(a.lambda.total_cmp(&b.lambda))
            .is_lt();
        if better {
            best = i;
        }
    }
    Ok(CvResult {
        best: grid[best],
        rmse,
    })
}

const MODEL_MAGIC: &[u8; 8] = b"QRMODEL\0";
pub const MODEL_VERSION: u32 = 1;
const MODEL_KIND: &str = "factor model";

pub fn write_model_to<W: Write>(model: &FactorModel, mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LE>(MODEL_VERSION)?;
    w.write_u32::<LE>(model.rank as u32)?;
    w.write_u64::<LE>(model.users.len() as u64)?;
    w.write_u64::<LE>(model.num_topics as u64)?;
    w.write_f64::<LE>(model.lambda)?;
    let meta = &model.meta;
    w.write_u64::<LE>(meta.epochs as u64)?;
    w.write_f64::<LE>(meta.learning_rate)?;
    w.write_u64::<LE>(meta.seed)?;
    w.write_f64::<LE>(meta.init_std)?;
    w.write_f64::<LE>(meta.train_rmse)?;
    w.write_u64::<LE>(meta.objective_trace.len() as u64)?;
    for &x in &meta.objective_trace {
        w.write_f64::<LE>(x)?;
    }
    for &u in &model.users {
        w.write_i64::<LE>(u)?;
    }
    for &x in model.user_factors.iter().chain(&model.topic_factors) {
        w.write_f64::<LE>(x)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model_from<R: Read>(mut r: R) -> Result<FactorModel> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::corrupt(MODEL_KIND, "file too short for header"))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::corrupt(MODEL_KIND, "bad magic bytes"));
    }
    let version = r.read_u32::<LE>()?;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            kind: MODEL_KIND,
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let rank = r.read_u32::<LE>()? as usize;
    let m = r.read_u64::<LE>()? as usize;
    let n = r.read_u64::<LE>()? as usize;
    let lambda = r.read_f64::<LE>()?;
    let epochs = r.read_u64::<LE>()? as usize;
    let learning_rate = r.read_f64::<LE>()?;
    let seed = r.read_u64::<LE>()?;
    let init_std = r.read_f64::<LE>()?;
    let train_rmse = r.read_f64::<LE>()?;
    let trace_len = r.read_u64::<LE>()? as usize;
    let read_f64s = |r: &mut R, len: usize| -> Result<Vec<f64>> {
        (0..len).map(|_| Ok(r.read_f64::<LE>()?)).collect()
    };
    let objective_trace = read_f64s(&mut r, trace_len)?;
    let users = (0..m).map(|_| Ok(r.read_i64::<LE>()?)).collect::<Result<Vec<_>>>()?;
    let user_factors = read_f64s(&mut r, m * rank)?;
    let topic_factors = read_f64s(&mut r, n * rank)?;
    let mut model = FactorModel::from_factors(users, user_factors, topic_factors, rank, lambda)
        .map_err(|e| Error::corrupt(MODEL_KIND, e.to_string()))?;
    model.num_topics = n;
    model.meta = TrainMeta {
        epochs,
        learning_rate,
        seed,
        init_std,
        train_rmse,
        objective_trace,
    };
    Ok(model)
}

pub fn save_model(model: &FactorModel, path: impl AsRef<Path>) -> Result<()> {
    write_model_to(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FactorModel> {
    read_model_from(BufReader::new(File::open(path)?))
}
