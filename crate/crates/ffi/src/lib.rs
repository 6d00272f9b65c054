//! C ABI for `blpmle`.
//!
//! Datasets and estimates cross the boundary as opaque handles, each
//! released with its `*_free` function. Every fallible call
//! returns a [`BlpStatus`]; on failure, [`blpmle_last_error_message`] describes
//! the most recent error on the calling thread.
//!
//! The estimation model is fixed to random coefficients on the second demand
//! characteristic (`x1`) and on price, which is the layout of the built-in
//! scenarios.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use blpmle::equilibrium::{draw_scenario, OwnershipMode, ScenarioConfig, ScenarioName, SupplyForm};
use blpmle::gmm::{build_instruments, two_step_estimate, GmmConfig, InstrumentKind};
use blpmle::io::read_dataset_csv;
use blpmle::likelihood::{concentrated_loglik, mle_estimate, LikelihoodSettings, MleConfig, StartPolicy};
use blpmle::model::{Dataset, MixedLogit, RcSource, ThetaNonlinear};
use blpmle::quadrature::DEFAULT_LEVEL;
use blpmle::{Error, ErrorKind};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad option value, unknown scenario name, too-small output buffer.
    InvalidArgument = 2,
    /// Unreadable file, schema violation, or inconsistent data.
    Data = 3,
    /// Non-convergence, singular matrices, or every optimizer start failing.
    Numerical = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlpEstimator {
    Mle = 0,
    Gmm = 1,
}

/// Options for [`blpmle_estimate`]. Obtain defaults from
/// [`blpmle_estimate_options_default`] and override fields as needed.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BlpEstimateOptions {
    pub estimator: BlpEstimator,
    /// Center of the region random starts are drawn from.
    pub start_alpha: f64,
    pub start_sigma_x: f64,
    pub start_sigma_price: f64,
    pub n_starts: u32,
    pub seed: u64,
    pub standard_errors: bool,
    /// Costs enter the supply equation in logs.
    pub log_linear_supply: bool,
    /// Treat every product as its own firm when recovering costs.
    pub single_product_firms: bool,
}

/// Opaque dataset handle.
pub struct BlpDataset {
    inner: Dataset,
}

/// Opaque estimation-result handle.
pub struct BlpEstimate {
    theta: Vec<f64>,
    standard_errors: Vec<f64>,
    objective: f64,
    converged: bool,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BlpStatus {
    match e.kind() {
        ErrorKind::Usage => BlpStatus::InvalidArgument,
        ErrorKind::Data => BlpStatus::Data,
        ErrorKind::Numerical => BlpStatus::Numerical,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Run `f`, translating errors and panics into a status and the thread's last
/// error message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BlpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BlpStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            BlpStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_last_error(msg);
            BlpStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            BlpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn model() -> blpmle::Result<MixedLogit> {
    MixedLogit::with_level(vec![RcSource::Demand(1), RcSource::Price], DEFAULT_LEVEL)
}

/// Library version. The string is static.
#[no_mangle]
pub extern "C" fn blpmle_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread, or null if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn blpmle_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Read a dataset CSV (columns `market_id, firm_id, shares, prices, x*, w*`).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blpmle_dataset_read_csv(path: *const c_char, out: *mut *mut BlpDataset) -> BlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = str_arg(path, "path")?;
        let inner = read_dataset_csv(std::path::Path::new(path))?;
        *out = Box::into_raw(Box::new(BlpDataset { inner }));
        Ok(())
    })
}

/// Draw a synthetic dataset from a named scenario (`no_cov`, `low_cov`,
/// `high_cov`, `laplace_no_cov`, `laplace_low_cov`, `supply_misspec`,
/// `ownership_misspec`).
///
/// # Safety
/// `scenario` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn blpmle_dataset_simulate(
    scenario: *const c_char,
    seed: u64,
    n_markets: usize,
    out: *mut *mut BlpDataset,
) -> BlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let name: ScenarioName = str_arg(scenario, "scenario")?.parse()?;
        let mut cfg = ScenarioConfig::preset(name, seed);
        cfg.n_markets = n_markets;
        cfg.validate()?;
        let inner = draw_scenario(&cfg)?.dataset;
        *out = Box::into_raw(Box::new(BlpDataset { inner }));
        Ok(())
    })
}

/// Number of markets, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blpmle_dataset_n_markets(dataset: *const BlpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.markets.len())
}

/// Number of product-market observations, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blpmle_dataset_n_observations(dataset: *const BlpDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.n_observations())
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blpmle_dataset_free(dataset: *mut BlpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Concentrated log-likelihood at `(alpha, sigma_x, sigma_price)` under linear
/// costs and the data's ownership. Any of the output pointers may be null.
///
/// # Safety
/// `dataset` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn blpmle_concentrated_loglik(
    dataset: *const BlpDataset,
    alpha: f64,
    sigma_x: f64,
    sigma_price: f64,
    out_total: *mut f64,
    out_covariance_term: *mut f64,
    out_jacobian_term: *mut f64,
) -> BlpStatus {
    guard(|| {
        let d = ref_arg(dataset, "dataset")?;
        let theta = ThetaNonlinear::new(alpha, vec![sigma_x, sigma_price]);
        theta.validate(2).map_err(|e| Failure::Invalid(e.to_string()))?;
        let v = concentrated_loglik(&model()?, &d.inner, &theta, &LikelihoodSettings::default())?;
        for (p, x) in [(out_total, v.total), (out_covariance_term, v.covariance_term), (out_jacobian_term, v.jacobian_term)] {
            if let Some(p) = p.as_mut() {
                *p = x;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn blpmle_estimate_options_default() -> BlpEstimateOptions {
    BlpEstimateOptions {
        estimator: BlpEstimator::Mle,
        start_alpha: -1.0,
        start_sigma_x: 1.0,
        start_sigma_price: 0.1,
        n_starts: 3,
        seed: 1,
        standard_errors: true,
        log_linear_supply: false,
        single_product_firms: false,
    }
}

fn estimate(d: &Dataset, o: &BlpEstimateOptions) -> Result<BlpEstimate, Failure> {
    if o.n_starts == 0 {
        return Err(Failure::Invalid("n_starts must be positive".into()));
    }
    let model = model()?;
    let center = ThetaNonlinear::new(o.start_alpha, vec![o.start_sigma_x, o.start_sigma_price]);
    center.validate(2).map_err(|e| Failure::Invalid(e.to_string()))?;
    let starts = StartPolicy {
        n_random: o.n_starts as usize,
        ..StartPolicy::around(&center, o.seed)
    };
    let likelihood = LikelihoodSettings {
        supply_form: if o.log_linear_supply { SupplyForm::LogLinear } else { SupplyForm::Linear },
        ownership: if o.single_product_firms { OwnershipMode::Identity } else { OwnershipMode::True },
        ..Default::default()
    };
    let (theta, se, objective, converged, json) = match o.estimator {
        BlpEstimator::Mle => {
            let mut c = MleConfig::new(starts);
            c.likelihood = likelihood;
            c.standard_errors = o.standard_errors;
            let r = mle_estimate(&model, d, &c)?;
            let se = r.standard_errors.as_ref().and_then(|s| s.values.clone());
            let json = serde_json::to_string(&r).map_err(Error::from)?;
            (r.theta_hat.to_vec(), se, r.loglik, r.converged, json)
        }
        BlpEstimator::Gmm => {
            let mut c = GmmConfig::new(starts);
            c.likelihood = likelihood;
            c.standard_errors = o.standard_errors;
            let z = build_instruments(&model, d, InstrumentKind::DifferentiationLocal)?;
            let r = two_step_estimate(&model, d, &z, &c)?;
            let se = r.standard_errors.as_ref().map(|s| s.values.clone());
            let json = serde_json::to_string(&r).map_err(Error::from)?;
            (r.theta_hat.to_vec(), se, r.objective, r.converged, json)
        }
    };
    let k = theta.len();
    let standard_errors = se.map_or(vec![f64::NAN; k], |v| v[..k].to_vec());
    Ok(BlpEstimate {
        theta,
        standard_errors,
        objective,
        converged,
        json: CString::new(json).map_err(|_| Failure::Invalid("result JSON contains NUL".into()))?,
    })
}

/// Estimate `(alpha, sigma_x, sigma_price)` on `dataset`. `options` may be
/// null for defaults.
///
/// # Safety
/// `dataset` must be a live handle; `options` null or valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate(
    dataset: *const BlpDataset,
    options: *const BlpEstimateOptions,
    out: *mut *mut BlpEstimate,
) -> BlpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let d = ref_arg(dataset, "dataset")?;
        let o = options.as_ref().copied().unwrap_or_else(|| blpmle_estimate_options_default());
        *out = Box::into_raw(Box::new(estimate(&d.inner, &o)?));
        Ok(())
    })
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    if len < src.len() {
        return Err(Failure::Invalid(format!("buffer holds {len} values, {} needed", src.len())));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

/// Copy `(alpha, sigma_x, sigma_price)` into `out` (at least 3 slots).
///
/// # Safety
/// `estimate` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate_theta(estimate: *const BlpEstimate, out: *mut f64, len: usize) -> BlpStatus {
    guard(|| copy_out(&ref_arg(estimate, "estimate")?.theta, out, len))
}

/// Copy the standard errors of `(alpha, sigma_x, sigma_price)` into `out`;
/// NaN where unavailable.
///
/// # Safety
/// `estimate` must be a live handle; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate_standard_errors(
    estimate: *const BlpEstimate,
    out: *mut f64,
    len: usize,
) -> BlpStatus {
    guard(|| copy_out(&ref_arg(estimate, "estimate")?.standard_errors, out, len))
}

/// Log-likelihood (MLE) or second-step objective (GMM); NaN for null.
///
/// # Safety
/// `estimate` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate_objective(estimate: *const BlpEstimate) -> f64 {
    estimate.as_ref().map_or(f64::NAN, |e| e.objective)
}

/// # Safety
/// `estimate` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate_converged(estimate: *const BlpEstimate) -> bool {
    estimate.as_ref().is_some_and(|e| e.converged)
}

/// Full result as JSON. The string is owned by the handle and lives until
/// [`blpmle_estimate_free`].
///
/// # Safety
/// `estimate` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate_json(estimate: *const BlpEstimate) -> *const c_char {
    estimate.as_ref().map_or(std::ptr::null(), |e| e.json.as_ptr())
}

/// # Safety
/// `estimate` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn blpmle_estimate_free(estimate: *mut BlpEstimate) {
    if !estimate.is_null() {
        drop(Box::from_raw(estimate));
    }
}
