//! Angle-delay profiles and the ADP dissimilarity metric.
//!
//! Per BS, the CSI matrix (n_rx x n_sc) is transformed with an unnormalized
//! forward DFT along the antenna axis and a 1/N_SC-scaled inverse DFT along
//! the subcarrier axis; the element-wise magnitude of the result is the ADP.
//! The dissimilarity between two CSI tensors is the sum over BSs of one minus
//! the Frobenius cosine between their (nonnegative) magnitude profiles, which
//! bounds it to [0, N_BS] and makes it invariant to global phase and to
//! positive per-sample scaling.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dft::{dft_naive, idft_row_scaled};
use crate::error::{Error, Result};
use crate::io_util::{expect_magic, read_f32, read_u32, write_f32, write_u32};
use crate::sim::CsiTensor;

/// Magnitude of the angle-delay transform at one BS: nonnegative, shape
/// (n_rx angle bins, n_sc delay taps), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AdpProfile {
    pub n_rx: usize,
    pub n_sc: usize,
    pub data: Vec<f64>,
}

impl AdpProfile {
    pub fn from_data(n_rx: usize, n_sc: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_rx * n_sc);
        Self { n_rx, n_sc, data }
    }

    #[inline]
    pub fn at(&self, angle_bin: usize, delay_tap: usize) -> f64 {
        self.data[angle_bin * self.n_sc + delay_tap]
    }

    /// Sum of squared entries (squared Frobenius norm).
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Complex angle-delay transform of one BS matrix; exposed for the
/// complex-inner-product metric variant.
fn angle_delay_complex(csi: &CsiTensor, b: usize) -> Vec<Complex64> {
    let (n_rx, n_sc) = (csi.n_rx, csi.n_sc);
    // Forward DFT along the antenna axis, per subcarrier column.
    let mut col_in = vec![Complex64::new(0.0, 0.0); n_rx];
    let mut col_out = vec![Complex64::new(0.0, 0.0); n_rx];
    let mut stage = vec![Complex64::new(0.0, 0.0); n_rx * n_sc];
    for l in 0..n_sc {
        for m in 0..n_rx {
            col_in[m] = csi.at(b, m, l);
        }
        dft_naive(&col_in, &mut col_out);
        for k in 0..n_rx {
            stage[k * n_sc + l] = col_out[k];
        }
    }
    // Scaled inverse DFT along the subcarrier axis, per angle-bin row.
    for row in stage.chunks_mut(n_sc) {
        idft_row_scaled(row);
    }
    stage
}

/// Per-BS ADP magnitude profiles of a CSI tensor.
pub fn adp_transform(csi: &CsiTensor) -> Vec<AdpProfile> {
    (0..csi.n_bs)
        .map(|b| {
            let complex = angle_delay_complex(csi, b);
            AdpProfile {
                n_rx: csi.n_rx,
                n_sc: csi.n_sc,
                data: complex.iter().map(|c| c.norm()).collect(),
            }
        })
        .collect()
}

/// Which inner product the dissimilarity uses. The magnitude-profile form is
/// the default everywhere; the complex variant keeps the real part of the
/// complex Frobenius inner product and is exposed for experiments only.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AdpVariant {
    MagnitudeProfile,
    ComplexRealPart,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One minus the Frobenius cosine for a single BS pair of magnitude profiles.
/// Exact 0 for bitwise-identical nonzero profiles; clamped so rounding can
/// never push a term outside [0, 1].
fn profile_term(p: &AdpProfile, q: &AdpProfile, bs: usize, pair: Option<(usize, usize)>) -> Result<f64> {
    let np = dot(&p.data, &p.data);
    let nq = dot(&q.data, &q.data);
    if np == 0.0 || nq == 0.0 {
        return Err(Error::UndefinedMetric { bs, pair });
    }
    if p.data == q.data {
        return Ok(0.0);
    }
    let cos = (dot(&p.data, &q.data) / (np.sqrt() * nq.sqrt())).clamp(0.0, 1.0);
    Ok(1.0 - cos)
}

/// ADP dissimilarity computed directly on profile lists (one per BS).
pub fn profiles_dissimilarity(a: &[AdpProfile], b: &[AdpProfile]) -> Result<f64> {
    profiles_dissimilarity_indexed(a, b, None)
}

fn profiles_dissimilarity_indexed(
    a: &[AdpProfile],
    b: &[AdpProfile],
    pair: Option<(usize, usize)>,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "profiles_dissimilarity",
            detail: format!("{} vs {} BS profiles", a.len(), b.len()),
        });
    }
    let mut total = 0.0;
    for (bs, (p, q)) in a.iter().zip(b).enumerate() {
        if p.n_rx != q.n_rx || p.n_sc != q.n_sc {
            return Err(Error::ShapeMismatch {
                op: "profiles_dissimilarity",
                detail: format!(
                    "BS {bs}: ({}, {}) vs ({}, {})",
                    p.n_rx, p.n_sc, q.n_rx, q.n_sc
                ),
            });
        }
        total += profile_term(p, q, bs, pair)?;
    }
    Ok(total)
}

/// ADP dissimilarity between two CSI tensors (magnitude-profile form).
pub fn adp_dissimilarity(h_i: &CsiTensor, h_j: &CsiTensor) -> Result<f64> {
    adp_dissimilarity_with(h_i, h_j, AdpVariant::MagnitudeProfile)
}

/// ADP dissimilarity with an explicit metric variant.
pub fn adp_dissimilarity_with(h_i: &CsiTensor, h_j: &CsiTensor, variant: AdpVariant) -> Result<f64> {
    if !h_i.same_shape(h_j) {
        return Err(Error::ShapeMismatch {
            op: "adp_dissimilarity",
            detail: format!("{:?} vs {:?}", h_i.shape(), h_j.shape()),
        });
    }
    match variant {
        AdpVariant::MagnitudeProfile => {
            profiles_dissimilarity(&adp_transform(h_i), &adp_transform(h_j))
        }
        AdpVariant::ComplexRealPart => {
            let mut total = 0.0;
            for b in 0..h_i.n_bs {
                let a = angle_delay_complex(h_i, b);
                let c = angle_delay_complex(h_j, b);
                let na: f64 = a.iter().map(|z| z.norm_sqr()).sum();
                let nc: f64 = c.iter().map(|z| z.norm_sqr()).sum();
                if na == 0.0 || nc == 0.0 {
                    return Err(Error::UndefinedMetric { bs: b, pair: None });
                }
                let inner: f64 = a.iter().zip(&c).map(|(x, y)| (x * y.conj()).re).sum();
                total += 1.0 - inner / (na.sqrt() * nc.sqrt());
            }
            Ok(total)
        }
    }
}

/// Precomputed per-sample ADP profiles, for metric evaluations that touch the
/// same samples many times (pairwise matrices, graph edges, retrieval scans).
/// Values are bit-identical to fresh `adp_dissimilarity` calls.
pub struct SampleProfiles {
    profiles: Vec<Vec<AdpProfile>>,
}

impl SampleProfiles {
    pub fn compute<'a, I>(samples: I) -> Self
    where
        I: IntoIterator<Item = &'a CsiTensor>,
    {
        let csis: Vec<&CsiTensor> = samples.into_iter().collect();
        let profiles = csis.par_iter().map(|c| adp_transform(c)).collect();
        Self { profiles }
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profiles(&self, i: usize) -> &[AdpProfile] {
        &self.profiles[i]
    }

    /// Dissimilarity between samples i and j.
    pub fn pair(&self, i: usize, j: usize) -> Result<f64> {
        if i == j {
            return Ok(0.0);
        }
        profiles_dissimilarity_indexed(&self.profiles[i], &self.profiles[j], Some((i, j)))
    }

    /// One dense row of the pairwise matrix, computed on demand.
    pub fn row(&self, i: usize) -> Result<Vec<f64>> {
        (0..self.len()).map(|j| self.pair(i, j)).collect()
    }
}

/// Dense symmetric dissimilarity matrix with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DissimilarityMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DissimilarityMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Full pairwise ADP dissimilarity matrix. Rows are computed in parallel;
/// symmetry is exact because the upper triangle is mirrored.
pub fn pairwise_dissimilarity(samples: &[CsiTensor]) -> Result<DissimilarityMatrix> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "pairwise_dissimilarity needs >= 2 samples, got {}",
            samples.len()
        )));
    }
    let profiles = SampleProfiles::compute(samples.iter());
    pairwise_from_profiles(&profiles)
}

/// Same as [`pairwise_dissimilarity`] but reusing precomputed profiles.
pub fn pairwise_from_profiles(profiles: &SampleProfiles) -> Result<DissimilarityMatrix> {
    let n = profiles.len();
    let rows: Result<Vec<Vec<(usize, f64)>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .map(|j| profiles.pair(i, j).map(|d| (j, d)))
                .collect()
        })
        .collect();
    let mut m = DissimilarityMatrix::zeros(n);
    for (i, row) in rows?.into_iter().enumerate() {
        for (j, d) in row {
            m.set(i, j, d);
            m.set(j, i, d);
        }
    }
    Ok(m)
}

// --- ADPM1 cache file -------------------------------------------------------

const ADPM_MAGIC: &[u8] = b"ADPM1";

/// Write the pairwise matrix cache: magic "ADPM1", u32 n, row-major f32.
pub fn write_adpm<P: AsRef<Path>>(path: P, m: &DissimilarityMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ADPM_MAGIC)?;
    write_u32(&mut w, m.n as u32)?;
    for v in &m.data {
        write_f32(&mut w, *v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Read an "ADPM1" pairwise matrix cache.
pub fn read_adpm<P: AsRef<Path>>(path: P) -> Result<DissimilarityMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, ADPM_MAGIC, "ADPM1")?;
    let n = read_u32(&mut r)? as usize;
    let mut m = DissimilarityMatrix::zeros(n);
    for v in m.data.iter_mut() {
        *v = read_f32(&mut r)? as f64;
    }
    Ok(m)
}
