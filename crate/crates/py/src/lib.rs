//! Python bindings: phantoms, image metrics, schedule coefficients,
//! configuration fingerprints and the command line.

use std::collections::BTreeMap;

use clap::Parser;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ::echodiff::cli::{run, Cli, RunConfig};
use ::echodiff::data::{generate_phantoms, to_display, PhantomStyle};
use ::echodiff::diffusion::make_schedule;
use ::echodiff::metrics::{self, extract_features, DisplayImage, FeatureStats};

/// `(id, display pixels, mask codes)` of one phantom.
type PhantomRow = (String, Vec<f64>, Vec<u8>);

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image(pixels: Vec<f64>, width: usize, height: usize) -> PyResult<DisplayImage> {
    DisplayImage::new(width, height, pixels).map_err(value_err)
}

/// Synthetic phantoms as `(id, pixels, mask)` tuples; pixels are on the
/// 0-255 display scale in row-major order, masks hold class codes 0-3.
#[pyfunction]
#[pyo3(signature = (n, side = 64, style = "a", seed = 7))]
fn phantoms(n: usize, side: usize, style: &str, seed: u64) -> PyResult<Vec<PhantomRow>> {
    let style: PhantomStyle = style.parse().map_err(value_err)?;
    let ds = generate_phantoms(n, side, style, seed).map_err(value_err)?;
    Ok(ds
        .samples
        .into_iter()
        .map(|s| {
            let px = s.image.iter().map(|&v| to_display(v)).collect();
            (s.id, px, s.mask)
        })
        .collect())
}

#[pyfunction]
fn mse(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    metrics::mse(&image(a, width, height)?, &image(b, width, height)?).map_err(value_err)
}

/// `None` for identical images.
#[pyfunction]
#[pyo3(signature = (a, b, width, height, max_value = 255.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize, max_value: f64) -> PyResult<Option<f64>> {
    metrics::psnr(&image(a, width, height)?, &image(b, width, height)?, max_value).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, width, height, max_value = 255.0))]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, height: usize, max_value: f64) -> PyResult<f64> {
    metrics::ssim(&image(a, width, height)?, &image(b, width, height)?, max_value).map_err(value_err)
}

/// Hand-crafted feature vector of one display-scale image.
#[pyfunction]
fn features(pixels: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<f64>> {
    Ok(extract_features(&image(pixels, width, height)?))
}

/// Fréchet distance between the Gaussians fitted to two feature sets.
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let fit = |rows: &[Vec<f64>]| FeatureStats::from_features(rows).map(FeatureStats::shrink_if_needed).map_err(value_err);
    metrics::frechet_distance(&fit(&a)?, &fit(&b)?).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (t, total_steps = 1000, span = 250, beta_min = 1e-4, beta_max = 0.02))]
fn span_coefficients(t: usize, total_steps: usize, span: usize, beta_min: f64, beta_max: f64) -> PyResult<BTreeMap<&'static str, f64>> {
    let sched = make_schedule(total_steps, span, beta_min, beta_max).map_err(value_err)?;
    let c = sched.span_coefficients(t).map_err(value_err)?;
    Ok(BTreeMap::from([
        ("alpha_span", c.alpha_span),
        ("beta_span", c.beta_span),
        ("posterior_mean_coeff_x0", c.posterior_mean_coeff_x0),
        ("posterior_mean_coeff_xt", c.posterior_mean_coeff_xt),
        ("posterior_variance", c.posterior_variance),
    ]))
}

/// Canonical text of the default configuration.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().canonical_text()
}

/// Fingerprint of a configuration document.
#[pyfunction]
fn config_fingerprint(text: &str) -> PyResult<String> {
    Ok(RunConfig::parse(text).map_err(value_err)?.fingerprint())
}

/// Runs one command line (without the program name) and returns its exit
/// code, as the `echodiff` binary would.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("echodiff".to_string()).chain(args)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    py.detach(|| match run(cli, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    })
}

#[pymodule]
fn echodiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(phantoms, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(span_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(config_fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
