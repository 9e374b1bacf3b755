//! Linear attention predictor, Gaussian prompt sampling and TTT updates.
//!
//! A prompt holds `n` labelled context rows and a query `x`. Collapsing the
//! query/key product into a `d × d` matrix `W` and fixing the value head to
//! read out labels, the prediction reduces to
//!
//! ```text
//! ŷ = xᵀ · W · X_ctxᵀ y_ctx
//! ```
//!
//! Test-time training takes `k` further labelled rows, uses each of them as a
//! query against the fixed context, and takes gradient steps on the squared
//! error. The gradient is the rank-one matrix `-2 X_trᵀ (y_tr - X_tr W u) uᵀ`
//! with `u = X_ctxᵀ y_ctx`.

use alloc::format;
use alloc::vec::Vec;

use crate::linalg::{self, gaussian_rows, matmul, normal, CovarianceFactor, DenseMatrix, DenseVector, RngState};
use crate::Error;

/// Orthonormality tolerance for a covariance basis.
pub const BASIS_TOL: f64 = 1e-12;

/// Jointly diagonal feature/task covariances `Σx = Q Λx Qᵀ`, `Σβ = Q Λβ Qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    basis: DenseMatrix,
    identity_basis: bool,
    feature_eigs: DenseVector,
    task_eigs: DenseVector,
}

impl CovarianceModel {
    pub fn new(basis: DenseMatrix, feature_eigs: DenseVector, task_eigs: DenseVector) -> Result<Self, Error> {
        let d = feature_eigs.dim();
        if basis.shape() != (d, d) || task_eigs.dim() != d {
            return Err(Error::Shape(format!(
                "covariance model: basis {}x{}, {} feature and {} task eigenvalues",
                basis.rows(),
                basis.cols(),
                d,
                task_eigs.dim()
            )));
        }
        for v in feature_eigs.as_slice().iter().chain(task_eigs.as_slice()) {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("covariance eigenvalue {v} is not finite and nonnegative")));
            }
        }
        let qtq = matmul(&basis.transpose(), &basis)?;
        let err = qtq.max_abs_diff(&DenseMatrix::identity(d))?;
        if err > BASIS_TOL {
            return Err(Error::Domain(format!("basis is not orthonormal (max |QᵀQ - I| = {err:e})")));
        }
        let identity_basis = basis == DenseMatrix::identity(d);
        Ok(Self { basis, identity_basis, feature_eigs, task_eigs })
    }

    /// Diagonal covariances in the standard basis.
    pub fn diagonal(feature_eigs: DenseVector, task_eigs: DenseVector) -> Result<Self, Error> {
        Self::new(DenseMatrix::identity(feature_eigs.dim()), feature_eigs, task_eigs)
    }

    /// `Σx = Σβ = I`.
    pub fn isotropic(d: usize) -> Self {
        Self {
            basis: DenseMatrix::identity(d),
            identity_basis: true,
            feature_eigs: DenseVector::filled(d, 1.0),
            task_eigs: DenseVector::filled(d, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_eigs.dim()
    }

    pub fn basis(&self) -> &DenseMatrix {
        &self.basis
    }

    pub fn has_identity_basis(&self) -> bool {
        self.identity_basis
    }

    pub fn feature_eigs(&self) -> &DenseVector {
        &self.feature_eigs
    }

    pub fn task_eigs(&self) -> &DenseVector {
        &self.task_eigs
    }

    /// True when `Σx = I`.
    pub fn features_are_identity(&self) -> bool {
        self.feature_eigs.as_slice().iter().all(|l| *l == 1.0)
    }

    /// True when `Σx = Σβ = I`.
    pub fn is_isotropic(&self) -> bool {
        self.features_are_identity() && self.task_eigs.as_slice().iter().all(|l| *l == 1.0)
    }

    pub fn feature_factor(&self) -> CovarianceFactor {
        if self.identity_basis {
            CovarianceFactor::diagonal(self.feature_eigs.as_slice()).expect("validated eigenvalues")
        } else {
            CovarianceFactor::from_eigen(self.basis.clone(), self.feature_eigs.as_slice()).expect("validated eigenvalues")
        }
    }

    pub fn feature_covariance(&self) -> DenseMatrix {
        self.spectral(|i| self.feature_eigs[i])
    }

    pub fn task_covariance(&self) -> DenseMatrix {
        self.spectral(|i| self.task_eigs[i])
    }

    /// `Σx^{1/2}`.
    pub fn feature_sqrt(&self) -> DenseMatrix {
        self.spectral(|i| libm::sqrt(self.feature_eigs[i]))
    }

    /// `Σx^{-1/2}`; fails when `Σx` is singular.
    pub fn feature_inv_sqrt(&self) -> Result<DenseMatrix, Error> {
        if self.feature_eigs.as_slice().iter().any(|l| *l <= 0.0) {
            return Err(Error::Domain("feature covariance is singular".into()));
        }
        Ok(self.spectral(|i| 1.0 / libm::sqrt(self.feature_eigs[i])))
    }

    /// `Q diag(f) Qᵀ`.
    pub fn spectral(&self, f: impl Fn(usize) -> f64) -> DenseMatrix {
        let d = self.dim();
        let diag: Vec<f64> = (0..d).map(f).collect();
        if self.identity_basis {
            return DenseMatrix::from_diag(&diag);
        }
        let q = &self.basis;
        DenseMatrix::from_fn(d, d, |i, j| (0..d).map(|l| q[(i, l)] * diag[l] * q[(j, l)]).sum())
    }

    /// Coordinates of `v` in the basis: `Qᵀ v`.
    pub fn to_basis(&self, v: &DenseVector) -> Result<DenseVector, Error> {
        if self.identity_basis {
            check_dim("to_basis", self.dim(), v.dim())?;
            return Ok(v.clone());
        }
        self.basis.tmatvec(v)
    }

    /// `Q c`.
    pub fn from_basis(&self, c: &DenseVector) -> Result<DenseVector, Error> {
        if self.identity_basis {
            check_dim("from_basis", self.dim(), c.dim())?;
            return Ok(c.clone());
        }
        self.basis.matvec(c)
    }

    /// `Qᵀ M Q`.
    pub fn matrix_to_basis(&self, m: &DenseMatrix) -> Result<DenseMatrix, Error> {
        if self.identity_basis {
            if m.shape() != (self.dim(), self.dim()) {
                return Err(Error::Shape(format!("matrix_to_basis: {}x{}", m.rows(), m.cols())));
            }
            return Ok(m.clone());
        }
        matmul(&matmul(&self.basis.transpose(), m)?, &self.basis)
    }

    /// `Q M Qᵀ`.
    pub fn matrix_from_basis(&self, m: &DenseMatrix) -> Result<DenseMatrix, Error> {
        if self.identity_basis {
            if m.shape() != (self.dim(), self.dim()) {
                return Err(Error::Shape(format!("matrix_from_basis: {}x{}", m.rows(), m.cols())));
            }
            return Ok(m.clone());
        }
        matmul(&matmul(&self.basis, m)?, &self.basis.transpose())
    }
}

/// Collapsed query-key matrix `W` of the attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    w: DenseMatrix,
}

impl AttentionWeights {
    pub fn new(w: DenseMatrix) -> Result<Self, Error> {
        if !w.is_square() {
            return Err(Error::Shape(format!("attention weights must be square, got {}x{}", w.rows(), w.cols())));
        }
        if !w.is_finite() {
            return Err(Error::Domain("attention weights must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn zeros(d: usize) -> Self {
        Self { w: DenseMatrix::zeros(d, d) }
    }

    pub fn scaled_identity(d: usize, s: f64) -> Self {
        Self { w: DenseMatrix::identity(d).scaled(s) }
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.w
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.w
    }
}

/// Task vector and label noise standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    beta: DenseVector,
    sigma: f64,
}

impl TaskInstance {
    pub fn new(beta: DenseVector, sigma: f64) -> Result<Self, Error> {
        if !beta.is_finite() {
            return Err(Error::Domain("task vector must be finite".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("noise level {sigma} must be finite and nonnegative")));
        }
        Ok(Self { beta, sigma })
    }

    pub fn noiseless(beta: DenseVector) -> Result<Self, Error> {
        Self::new(beta, 0.0)
    }

    pub fn beta(&self) -> &DenseVector {
        &self.beta
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.beta.dim()
    }
}

/// One sampled test-time set: `n` context rows and `k` query-training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TestTimeSet {
    x_ctx: DenseMatrix,
    y_ctx: DenseVector,
    x_tr: DenseMatrix,
    y_tr: DenseVector,
}

impl TestTimeSet {
    /// An empty query block is written as `DenseMatrix::empty_rows(d)` with
    /// `DenseVector::empty()`.
    pub fn new(x_ctx: DenseMatrix, y_ctx: DenseVector, x_tr: DenseMatrix, y_tr: DenseVector) -> Result<Self, Error> {
        if x_ctx.rows() == 0 {
            return Err(Error::Shape("context needs n >= 1".into()));
        }
        if x_ctx.cols() != x_tr.cols() || x_ctx.rows() != y_ctx.dim() || x_tr.rows() != y_tr.dim() {
            return Err(Error::Shape(format!(
                "test-time set: context {}x{} with {} labels, train {}x{} with {} labels",
                x_ctx.rows(),
                x_ctx.cols(),
                y_ctx.dim(),
                x_tr.rows(),
                x_tr.cols(),
                y_tr.dim()
            )));
        }
        Ok(Self { x_ctx, y_ctx, x_tr, y_tr })
    }

    pub fn x_ctx(&self) -> &DenseMatrix {
        &self.x_ctx
    }

    pub fn y_ctx(&self) -> &DenseVector {
        &self.y_ctx
    }

    pub fn x_tr(&self) -> &DenseMatrix {
        &self.x_tr
    }

    pub fn y_tr(&self) -> &DenseVector {
        &self.y_tr
    }

    pub fn n(&self) -> usize {
        self.x_ctx.rows()
    }

    pub fn k(&self) -> usize {
        self.x_tr.rows()
    }

    pub fn d(&self) -> usize {
        self.x_ctx.cols()
    }

    /// `u = X_ctxᵀ y_ctx`.
    pub fn context_vector(&self) -> DenseVector {
        self.x_ctx.tmatvec(&self.y_ctx).expect("validated shapes")
    }
}

/// Geometric step-size schedule `η_t = eta0 · decayᵗ`, `t = 0..steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    eta0: f64,
    decay: f64,
    steps: usize,
}

impl StepSchedule {
    pub fn new(eta0: f64, decay: f64, steps: usize) -> Result<Self, Error> {
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::Domain(format!("eta0 = {eta0} must be positive")));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Domain(format!("decay = {decay} must lie in (0, 1]")));
        }
        if steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        Ok(Self { eta0, decay, steps })
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn eta(&self, t: usize) -> f64 {
        self.eta0 * libm::pow(self.decay, t as f64)
    }
}

fn check_dim(op: &str, expected: usize, got: usize) -> Result<(), Error> {
    if expected != got {
        return Err(Error::Shape(format!("{op}: expected dimension {expected}, got {got}")));
    }
    Ok(())
}

/// Prediction `x_queryᵀ W X_ctxᵀ y_ctx`.
pub fn forward(
    w: &AttentionWeights,
    x_ctx: &DenseMatrix,
    y_ctx: &DenseVector,
    x_query: &DenseVector,
) -> Result<f64, Error> {
    check_dim("forward context", w.dim(), x_ctx.cols())?;
    check_dim("forward query", w.dim(), x_query.dim())?;
    let u = x_ctx.tmatvec(y_ctx)?;
    w.matrix().bilinear(x_query, &u)
}

/// Draws `n + k` rows from `N(0, Σx)` with labels `xᵀβ + ξ`, `ξ ~ N(0, σ²)`.
pub fn sample_test_time_set(
    rng: &mut RngState,
    cov: &CovarianceModel,
    task: &TaskInstance,
    n: usize,
    k: usize,
) -> Result<TestTimeSet, Error> {
    check_dim("sample_test_time_set", cov.dim(), task.dim())?;
    if n == 0 {
        return Err(Error::Shape("context needs n >= 1".into()));
    }
    let factor = cov.feature_factor();
    let x_ctx = gaussian_rows(rng, n, &factor);
    let y_ctx = labels(rng, &x_ctx, task);
    let x_tr = gaussian_rows(rng, k, &factor);
    let y_tr = labels(rng, &x_tr, task);
    TestTimeSet::new(x_ctx, y_ctx, x_tr, y_tr)
}

fn labels(rng: &mut RngState, x: &DenseMatrix, task: &TaskInstance) -> DenseVector {
    let beta = task.beta().as_slice();
    let mut y = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let mut v = linalg::dot(x.row(i), beta);
        if task.sigma() > 0.0 {
            v += task.sigma() * normal(rng);
        }
        y.push(v);
    }
    if y.is_empty() {
        DenseVector::empty()
    } else {
        DenseVector::new(y).expect("non-empty")
    }
}

/// Residuals `y_tr - X_tr W u` of the query-training rows.
fn train_residuals(w: &AttentionWeights, set: &TestTimeSet, u: &DenseVector) -> Result<DenseVector, Error> {
    check_dim("attention weights", set.d(), w.dim())?;
    if set.k() == 0 {
        return Ok(DenseVector::empty());
    }
    let wu = w.matrix().matvec(u)?;
    let pred = set.x_tr().matvec(&wu)?;
    set.y_tr().sub(&pred)
}

/// `Σⱼ (yⱼ - forward(W, X_ctx, y_ctx, xⱼ))²` over the query-training rows.
pub fn empirical_train_loss(w: &AttentionWeights, set: &TestTimeSet) -> Result<f64, Error> {
    let u = set.context_vector();
    Ok(train_residuals(w, set, &u)?.norm_sq())
}

/// Gradient of [`empirical_train_loss`] with respect to `W`.
pub fn train_loss_gradient(w: &AttentionWeights, set: &TestTimeSet) -> Result<DenseMatrix, Error> {
    let u = set.context_vector();
    let r = train_residuals(w, set, &u)?;
    let mut g = DenseMatrix::zeros(set.d(), set.d());
    if set.k() > 0 {
        let a = set.x_tr().tmatvec(&r)?;
        g.add_outer(-2.0, &a, &u)?;
    }
    Ok(g)
}

/// One gradient step `W + 2η X_trᵀ (y_tr - X_tr W u) uᵀ`.
pub fn ttt_step(w: &AttentionWeights, set: &TestTimeSet, eta: f64) -> Result<AttentionWeights, Error> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Domain(format!("step size {eta} must be finite and nonnegative")));
    }
    let u = set.context_vector();
    let r = train_residuals(w, set, &u)?;
    let mut next = w.matrix().clone();
    if set.k() > 0 && eta > 0.0 {
        let a = set.x_tr().tmatvec(&r)?;
        next.add_outer(2.0 * eta, &a, &u)?;
    }
    AttentionWeights::new(next)
}

/// `schedule.steps()` applications of [`ttt_step`] with decaying step sizes.
pub fn ttt_multi_step(w: &AttentionWeights, set: &TestTimeSet, schedule: &StepSchedule) -> Result<AttentionWeights, Error> {
    let mut cur = w.clone();
    for t in 0..schedule.steps() {
        cur = ttt_step(&cur, set, schedule.eta(t))?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_orthonormal, seeded_rng};

    fn vecd(v: &[f64]) -> DenseVector {
        DenseVector::new(v.to_vec()).unwrap()
    }

    fn small_set(seed: u64, d: usize, n: usize, k: usize) -> TestTimeSet {
        let mut rng = seeded_rng(seed);
        let beta = DenseVector::new((0..d).map(|_| normal(&mut rng)).collect()).unwrap();
        let task = TaskInstance::new(beta, 0.2).unwrap();
        sample_test_time_set(&mut rng, &CovarianceModel::isotropic(d), &task, n, k).unwrap()
    }

    fn random_weights(seed: u64, d: usize) -> AttentionWeights {
        let mut rng = seeded_rng(seed);
        AttentionWeights::new(DenseMatrix::from_fn(d, d, |_, _| 0.1 * normal(&mut rng))).unwrap()
    }

    #[test]
    fn zero_weights_predict_zero() {
        let set = small_set(1, 3, 4, 2);
        let x = vecd(&[1.0, -2.0, 0.5]);
        assert_eq!(forward(&AttentionWeights::zeros(3), set.x_ctx(), set.y_ctx(), &x).unwrap(), 0.0);
    }

    #[test]
    fn scalar_forward() {
        let w = AttentionWeights::new(DenseMatrix::from_rows(&[&[0.5]]).unwrap()).unwrap();
        let x = DenseMatrix::from_rows(&[&[3.0]]).unwrap();
        let y = vecd(&[-2.0]);
        let q = vecd(&[7.0]);
        assert_eq!(forward(&w, &x, &y, &q).unwrap(), 7.0 * 0.5 * 3.0 * -2.0);
    }

    #[test]
    fn forward_matches_block_attention() {
        // Z = [[X, y], [xᵀ, 0]], W_QW_Kᵀ = [[W, 0], [0, 0]], W_V = [[0, 0], [0, 1]].
        let (d, n) = (3, 5);
        let set = small_set(2, d, n, 1);
        let w = random_weights(3, d);
        let x = set.x_tr().row(0).to_vec();
        let z = DenseMatrix::from_fn(n + 1, d + 1, |i, j| match (i < n, j < d) {
            (true, true) => set.x_ctx()[(i, j)],
            (true, false) => set.y_ctx()[i],
            (false, true) => x[j],
            (false, false) => 0.0,
        });
        let wqk = DenseMatrix::from_fn(d + 1, d + 1, |i, j| if i < d && j < d { w.matrix()[(i, j)] } else { 0.0 });
        let wv = DenseMatrix::from_fn(d + 1, d + 1, |i, j| if i == d && j == d { 1.0 } else { 0.0 });
        let full = matmul(&matmul(&matmul(&matmul(&z, &wqk).unwrap(), &z.transpose()).unwrap(), &z).unwrap(), &wv).unwrap();
        let pred = forward(&w, set.x_ctx(), set.y_ctx(), &vecd(&x)).unwrap();
        assert!((full[(n, d)] - pred).abs() < 1e-12 * (1.0 + pred.abs()));
    }

    #[test]
    fn noiseless_labels_are_exact() {
        let mut rng = seeded_rng(4);
        let task = TaskInstance::noiseless(vecd(&[1.0, -1.0, 2.0])).unwrap();
        let set = sample_test_time_set(&mut rng, &CovarianceModel::isotropic(3), &task, 6, 2).unwrap();
        let y = set.x_ctx().matvec(task.beta()).unwrap();
        assert_eq!(&y, set.y_ctx());
    }

    #[test]
    fn zero_task_gives_zero_labels() {
        let mut rng = seeded_rng(5);
        let task = TaskInstance::noiseless(DenseVector::zeros(2)).unwrap();
        let set = sample_test_time_set(&mut rng, &CovarianceModel::isotropic(2), &task, 3, 3).unwrap();
        assert_eq!(set.y_ctx().norm_sq() + set.y_tr().norm_sq(), 0.0);
    }

    #[test]
    fn label_noise_variance() {
        let mut rng = seeded_rng(6);
        let sigma = 0.7;
        let task = TaskInstance::new(vecd(&[0.5, 1.0]), sigma).unwrap();
        let set = sample_test_time_set(&mut rng, &CovarianceModel::isotropic(2), &task, 100_000, 0).unwrap();
        let resid = set.y_ctx().sub(&set.x_ctx().matvec(task.beta()).unwrap()).unwrap();
        let m = resid.dim() as f64;
        let sq: Vec<f64> = resid.as_slice().iter().map(|r| r * r).collect();
        let mean = sq.iter().sum::<f64>() / m;
        let var = sq.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (m - 1.0);
        assert!((mean - sigma * sigma).abs() <= 3.0 * libm::sqrt(var / m));
    }

    #[test]
    fn eta_zero_and_empty_query_keep_weights() {
        let w = random_weights(7, 3);
        let set = small_set(8, 3, 4, 2);
        assert_eq!(ttt_step(&w, &set, 0.0).unwrap(), w);
        let empty = small_set(8, 3, 4, 0);
        assert_eq!(ttt_step(&w, &empty, 0.3).unwrap(), w);
        assert_eq!(empirical_train_loss(&w, &empty).unwrap(), 0.0);
    }

    #[test]
    fn step_matches_finite_differences() {
        let (d, n, k) = (3, 4, 2);
        let set = small_set(9, d, n, k);
        let w = random_weights(10, d);
        let eta = 0.01;
        let next = ttt_step(&w, &set, eta).unwrap();
        let h = 1e-5;
        for i in 0..d {
            for j in 0..d {
                let mut plus = w.matrix().clone();
                plus[(i, j)] += h;
                let mut minus = w.matrix().clone();
                minus[(i, j)] -= h;
                let lp = empirical_train_loss(&AttentionWeights::new(plus).unwrap(), &set).unwrap();
                let lm = empirical_train_loss(&AttentionWeights::new(minus).unwrap(), &set).unwrap();
                let fd_step = w.matrix()[(i, j)] - eta * (lp - lm) / (2.0 * h);
                assert!((fd_step - next.matrix()[(i, j)]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn train_loss_matches_loop() {
        let set = small_set(11, 4, 5, 6);
        let w = random_weights(12, 4);
        let mut brute = 0.0;
        for j in 0..set.k() {
            let x = DenseVector::new(set.x_tr().row(j).to_vec()).unwrap();
            let r = set.y_tr()[j] - forward(&w, set.x_ctx(), set.y_ctx(), &x).unwrap();
            brute += r * r;
        }
        let fast = empirical_train_loss(&w, &set).unwrap();
        assert!((brute - fast).abs() <= 1e-12 * brute.max(1.0));
    }

    #[test]
    fn interpolating_weights_have_zero_loss() {
        // d = 1: W = β / (u · 1) predicts xβ exactly for noiseless labels.
        let mut rng = seeded_rng(13);
        let task = TaskInstance::noiseless(vecd(&[2.0])).unwrap();
        let set = sample_test_time_set(&mut rng, &CovarianceModel::isotropic(1), &task, 3, 4).unwrap();
        let u = set.context_vector()[0];
        let w = AttentionWeights::new(DenseMatrix::from_rows(&[&[2.0 / u]]).unwrap()).unwrap();
        assert!(empirical_train_loss(&w, &set).unwrap() < 1e-20);
    }

    #[test]
    fn multi_step_unrolls() {
        let set = small_set(14, 3, 4, 5);
        let w = random_weights(15, 3);
        let eta = 0.002;
        let one = StepSchedule::new(eta, 0.5, 1).unwrap();
        assert_eq!(ttt_multi_step(&w, &set, &one).unwrap(), ttt_step(&w, &set, eta).unwrap());
        let three = StepSchedule::new(eta, 0.5, 3).unwrap();
        let manual = [eta, eta / 2.0, eta / 4.0].iter().fold(w.clone(), |cur, e| ttt_step(&cur, &set, *e).unwrap());
        assert_eq!(ttt_multi_step(&w, &set, &three).unwrap(), manual);
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::new(0.0, 1.0, 1).is_err());
        assert!(StepSchedule::new(1.0, 0.0, 1).is_err());
        assert!(StepSchedule::new(1.0, 1.5, 1).is_err());
        assert!(StepSchedule::new(1.0, 1.0, 0).is_err());
    }

    #[test]
    fn rotated_model_round_trips() {
        let mut rng = seeded_rng(16);
        let q = random_orthonormal(&mut rng, 4).unwrap();
        let cov = CovarianceModel::new(q, vecd(&[1.0, 2.0, 3.0, 4.0]), vecd(&[1.0; 4])).unwrap();
        let v = vecd(&[0.1, 0.2, -0.3, 0.4]);
        let back = cov.from_basis(&cov.to_basis(&v).unwrap()).unwrap();
        assert!(back.sub(&v).unwrap().norm() < 1e-14);
        let s = cov.feature_sqrt();
        let s2 = matmul(&s, &s).unwrap();
        assert!(s2.max_abs_diff(&cov.feature_covariance()).unwrap() < 1e-12);
    }

    #[test]
    fn non_orthonormal_basis_rejected() {
        let q = DenseMatrix::from_rows(&[&[1.0, 0.1], &[0.0, 1.0]]).unwrap();
        let e = vecd(&[1.0, 1.0]);
        assert!(matches!(CovarianceModel::new(q, e.clone(), e), Err(Error::Domain(_))));
    }

    #[test]
    fn mismatched_set_rejected() {
        let x = DenseMatrix::zeros(2, 3);
        let bad = TestTimeSet::new(x.clone(), vecd(&[0.0, 0.0]), DenseMatrix::zeros(1, 2), vecd(&[0.0]));
        assert!(matches!(bad, Err(Error::Shape(_))));
        let ok = TestTimeSet::new(x, vecd(&[0.0, 0.0]), DenseMatrix::empty_rows(3), DenseVector::empty());
        assert!(ok.is_ok());
    }
}
