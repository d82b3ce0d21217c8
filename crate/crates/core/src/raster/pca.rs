//! PCA over the spectral axis of a raster stack.
//!
//! Pixels are treated as samples and bands as features. The eigensolver is a
//! cyclic Jacobi iteration written here so the fitted model has no dependency
//! on an external linear-algebra crate; the test suite cross-checks it
//! against an independent solver.

use ndarray::{Array2, Array3, Axis};

use super::RasterStack;
use crate::{Error, Result};

/// Fitted projection: `y = components · (x - mean)` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// Per-band mean, length = input bands.
    pub mean: Vec<f64>,
    /// One row per retained component, `[k, bands]`, rows orthonormal and
    /// ordered by non-increasing explained variance. The sign of each row is
    /// fixed so its largest-magnitude coefficient is positive.
    pub components: Array2<f64>,
    /// Eigenvalue (variance along the component) per retained row.
    pub explained: Vec<f64>,
    /// Sum of all eigenvalues of the band covariance.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn output_bands(&self) -> usize {
        self.components.nrows()
    }

    pub fn input_bands(&self) -> usize {
        self.components.ncols()
    }

    /// Fraction of total variance captured by the retained components.
    pub fn explained_fraction(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.explained.iter().sum::<f64>() / self.total_variance
        } else {
            1.0
        }
    }
}

/// Fits a PCA with `k` components on the stack's pixels.
pub fn fit_pca(stack: &RasterStack, k: usize) -> Result<PcaModel> {
    let bands = stack.bands();
    let pixels = stack.height() * stack.width();
    if k == 0 || k > bands {
        return Err(Error::Argument(format!(
            "requested {k} components from a {bands}-band stack"
        )));
    }
    if pixels < 2 {
        return Err(Error::Data(
            "PCA needs at least two pixels to estimate covariance".into(),
        ));
    }

    let flat = stack
        .data
        .view()
        .into_shape_with_order((bands, pixels))
        .expect("band-major stack is contiguous");

    let mut mean = vec![0.0f64; bands];
    for (b, row) in flat.axis_iter(Axis(0)).enumerate() {
        mean[b] = row.iter().map(|&v| v as f64).sum::<f64>() / pixels as f64;
    }

    // Sample covariance with the 1/(n-1) convention.
    let mut cov = Array2::<f64>::zeros((bands, bands));
    let denom = (pixels - 1) as f64;
    for p in 0..pixels {
        for i in 0..bands {
            let di = flat[[i, p]] as f64 - mean[i];
            for j in i..bands {
                let dj = flat[[j, p]] as f64 - mean[j];
                cov[[i, j]] += di * dj / denom;
            }
        }
    }
    for i in 0..bands {
        for j in 0..i {
            cov[[i, j]] = cov[[j, i]];
        }
    }

    let (eigvals, eigvecs) = jacobi_eigh(&cov);
    let total_variance: f64 = eigvals.iter().sum();

    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());

    let mut components = Array2::<f64>::zeros((k, bands));
    let mut explained = Vec::with_capacity(k);
    for (row, &src) in order.iter().take(k).enumerate() {
        explained.push(eigvals[src]);
        for b in 0..bands {
            components[[row, b]] = eigvecs[[b, src]];
        }
        let mut best = 0;
        for b in 1..bands {
            if components[[row, b]].abs() > components[[row, best]].abs() {
                best = b;
            }
        }
        if components[[row, best]] < 0.0 {
            for b in 0..bands {
                components[[row, b]] = -components[[row, b]];
            }
        }
    }

    Ok(PcaModel {
        mean,
        components,
        explained,
        total_variance,
    })
}

/// Projects a stack through a fitted model, keeping the modality id.
pub fn apply_pca(model: &PcaModel, stack: &RasterStack) -> Result<RasterStack> {
    let bands = stack.bands();
    if bands != model.input_bands() {
        return Err(Error::Argument(format!(
            "stack has {bands} bands, model was fitted on {}",
            model.input_bands()
        )));
    }
    let (h, w) = (stack.height(), stack.width());
    let pixels = h * w;
    let k = model.output_bands();
    let flat = stack
        .data
        .view()
        .into_shape_with_order((bands, pixels))
        .expect("band-major stack is contiguous");

    let mut out = Array3::<f32>::zeros((k, h, w));
    {
        let mut out_flat = out
            .view_mut()
            .into_shape_with_order((k, pixels))
            .expect("freshly allocated output is contiguous");
        for p in 0..pixels {
            for row in 0..k {
                let mut acc = 0.0f64;
                for b in 0..bands {
                    acc += model.components[[row, b]] * (flat[[b, p]] as f64 - model.mean[b]);
                }
                out_flat[[row, p]] = acc as f32;
            }
        }
    }
    Ok(RasterStack {
        modality_id: stack.modality_id.clone(),
        data: out,
    })
}

/// Convenience: fit on the stack and project it in one call.
pub fn pca_reduce(stack: &RasterStack, k: usize) -> Result<(RasterStack, PcaModel)> {
    let model = fit_pca(stack, k)?;
    let reduced = apply_pca(&model, stack)?;
    Ok((reduced, model))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns (eigenvalues, eigenvectors) with eigenvectors in columns, unsorted.
fn jacobi_eigh(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = c * mip - s * miq;
                    m[[i, q]] = s * mip + c * miq;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = c * mpj - s * mqj;
                    m[[q, j]] = s * mpj + c * mqj;
                }
                for i in 0..n {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }

    let eigvals: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    (eigvals, v)
}
