//! Synthetic multi-BS OFDM CSI generation.
//!
//! Scenes are parametric: a rectangular area, a handful of base stations with
//! uniform linear arrays, and point scatterers. Each user position produces
//! one line-of-sight path per BS plus one single-bounce path per scatterer.
//! The frequency-domain channel follows the classic multipath superposition
//! `h_{b,m,l} = sum_p beta_p e^{-j2pi f_l tau_p} [a(phi_p)]_m + noise` with
//! `f_l = f_c + l*delta_f` (0-based subcarrier index) and a ULA steering
//! vector `[a(phi)]_m = e^{-j2pi (d/lambda) m sin(phi)}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dft::idft_row_scaled;
use crate::error::{Error, Result};
use crate::io_util::{expect_magic, read_f32, read_u32, write_f32, write_u32};
use crate::rng;

/// Propagation speed used for all delay computations (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Amplitude of the bounce-path gain relative to free-space decay.
pub const REFLECTION_LOSS: f64 = 0.3;

/// 2D point in meters.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    /// Bearing of `other` as seen from `self`, in radians.
    pub fn bearing_to(&self, other: &Point2) -> f64 {
        (other.y - self.y).atan2(other.x - self.x)
    }
}

/// Axis-aligned rectangle in meters.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub min: Point2,
    pub max: Point2,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min: Point2::new(min_x, min_y),
            max: Point2::new(max_x, max_y),
        }
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diagonal(&self) -> f64 {
        self.min.dist(&self.max)
    }

    fn sample_uniform(&self, rng: &mut impl Rng) -> Point2 {
        Point2::new(
            rng.gen_range(self.min.x..=self.max.x),
            rng.gen_range(self.min.y..=self.max.y),
        )
    }
}

/// Scene and radio parameters for one synthetic deployment.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioConfig {
    pub n_bs: usize,
    pub n_rx: usize,
    pub n_sc: usize,
    /// Carrier frequency f_c in Hz.
    pub carrier_freq: f64,
    /// Subcarrier spacing delta_f in Hz.
    pub subcarrier_spacing: f64,
    /// ULA element spacing as a fraction of the carrier wavelength.
    pub antenna_spacing_over_lambda: f64,
    /// Rectangle the user moves in, meters.
    pub area: Rect,
    /// One position per BS; may lie outside `area`.
    pub bs_positions: Vec<Point2>,
    /// Array broadside direction per BS, radians.
    pub bs_orientations: Vec<f64>,
    /// Number of single-bounce point scatterers in the scene.
    pub n_scatterers: usize,
    /// Complex AWGN amplitude std (E|n|^2 = noise_std^2); 0 disables noise.
    pub noise_std: f64,
    pub rng_seed: u64,
}

impl ScenarioConfig {
    /// Small configuration that runs in seconds: 2 BS, 8 antennas, 64
    /// subcarriers at 3.5 GHz / 120 kHz spacing over a 20 m x 20 m area.
    /// The noise level corresponds to roughly 20 dB SNR on this scene.
    pub fn desk_default() -> Self {
        Self {
            n_bs: 2,
            n_rx: 8,
            n_sc: 64,
            carrier_freq: 3.5e9,
            subcarrier_spacing: 120e3,
            antenna_spacing_over_lambda: 0.5,
            area: Rect::new(0.0, 0.0, 20.0, 20.0),
            bs_positions: vec![Point2::new(-2.0, 10.0), Point2::new(22.0, 10.0)],
            bs_orientations: vec![0.0, std::f64::consts::PI],
            n_scatterers: 5,
            noise_std: 0.01,
            rng_seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_bs < 1 {
            return fail("n_bs must be >= 1".into());
        }
        if self.n_rx < 1 {
            return fail("n_rx must be >= 1".into());
        }
        if self.n_sc < 2 {
            return fail("n_sc must be >= 2".into());
        }
        if self.noise_std < 0.0 {
            return fail("noise_std must be >= 0".into());
        }
        if self.carrier_freq <= 0.0 || self.subcarrier_spacing <= 0.0 {
            return fail("carrier_freq and subcarrier_spacing must be positive".into());
        }
        if self.bs_positions.len() != self.n_bs {
            return fail(format!(
                "bs_positions has {} entries, expected n_bs={}",
                self.bs_positions.len(),
                self.n_bs
            ));
        }
        if self.bs_orientations.len() != self.n_bs {
            return fail(format!(
                "bs_orientations has {} entries, expected n_bs={}",
                self.bs_orientations.len(),
                self.n_bs
            ));
        }
        if self.area.width() <= 0.0 || self.area.height() <= 0.0 {
            return fail("area must have positive extent".into());
        }
        Ok(())
    }

    /// Largest delay representable without aliasing: 1/delta_f.
    pub fn max_delay(&self) -> f64 {
        1.0 / self.subcarrier_spacing
    }
}

/// One multipath component at one BS.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct PathComponent {
    /// Complex gain beta.
    pub gain: Complex64,
    /// Propagation delay tau in seconds.
    pub delay: f64,
    /// Angle of arrival relative to the array broadside, radians.
    pub aoa: f64,
}

/// Complex channel observations of shape (n_bs, n_rx, n_sc), stored row-major
/// so each (bs, rx) row over subcarriers is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiTensor {
    pub n_bs: usize,
    pub n_rx: usize,
    pub n_sc: usize,
    pub data: Vec<Complex64>,
}

impl CsiTensor {
    pub fn zeros(n_bs: usize, n_rx: usize, n_sc: usize) -> Self {
        Self {
            n_bs,
            n_rx,
            n_sc,
            data: vec![Complex64::new(0.0, 0.0); n_bs * n_rx * n_sc],
        }
    }

    #[inline]
    pub fn at(&self, b: usize, m: usize, l: usize) -> Complex64 {
        self.data[(b * self.n_rx + m) * self.n_sc + l]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, m: usize, l: usize) -> &mut Complex64 {
        &mut self.data[(b * self.n_rx + m) * self.n_sc + l]
    }

    /// Contiguous subcarrier row for one (bs, rx) pair.
    #[inline]
    pub fn row(&self, b: usize, m: usize) -> &[Complex64] {
        let start = (b * self.n_rx + m) * self.n_sc;
        &self.data[start..start + self.n_sc]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_bs, self.n_rx, self.n_sc)
    }

    pub fn same_shape(&self, other: &CsiTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Scale every entry by a complex factor.
    pub fn scaled(&self, factor: Complex64) -> CsiTensor {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        out
    }
}

/// CSI tensor paired with the ground-truth 2D position it was observed at.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub csi: CsiTensor,
    pub position: Point2,
}

/// ULA steering vector: element m is `exp(-j 2pi s m sin(aoa))` where s is
/// the element spacing in wavelengths. Element 0 is exactly 1.
pub fn array_response(aoa: f64, n_rx: usize, spacing_over_lambda: f64) -> Vec<Complex64> {
    let k = -2.0 * std::f64::consts::PI * spacing_over_lambda * aoa.sin();
    (0..n_rx)
        .map(|m| Complex64::from_polar(1.0, k * m as f64))
        .collect()
}

/// Superimpose multipath components into a frequency-domain CSI tensor and
/// add complex AWGN with the configured amplitude std (skipped when zero).
pub fn synth_channel(
    paths_per_bs: &[Vec<PathComponent>],
    config: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CsiTensor> {
    if paths_per_bs.len() != config.n_bs {
        return Err(Error::Config(format!(
            "paths_per_bs has {} entries, expected n_bs={}",
            paths_per_bs.len(),
            config.n_bs
        )));
    }
    let mut csi = CsiTensor::zeros(config.n_bs, config.n_rx, config.n_sc);
    for (b, paths) in paths_per_bs.iter().enumerate() {
        for path in paths {
            let steer = array_response(path.aoa, config.n_rx, config.antenna_spacing_over_lambda);
            for (m, &a_m) in steer.iter().enumerate() {
                let coeff = path.gain * a_m;
                for l in 0..config.n_sc {
                    let f_l = config.carrier_freq + l as f64 * config.subcarrier_spacing;
                    // e^{-j 2pi f_l tau}; the phase is huge (f_l ~ GHz), so
                    // reduce mod 2pi in f64 via from_polar directly.
                    let phase = -2.0 * std::f64::consts::PI * f_l * path.delay;
                    *csi.at_mut(b, m, l) += coeff * Complex64::from_polar(1.0, phase);
                }
            }
        }
    }
    if config.noise_std > 0.0 {
        let per_component = Normal::new(0.0, config.noise_std / 2f64.sqrt())
            .map_err(|e| Error::Config(format!("bad noise_std: {e}")))?;
        for v in csi.data.iter_mut() {
            let re = per_component.sample(rng);
            let im = per_component.sample(rng);
            *v += Complex64::new(re, im);
        }
    }
    Ok(csi)
}

/// Geometric multipath for one user position: per BS a LOS path plus one
/// single-bounce path per scatterer. Gains decay as 1/path-length with a
/// uniform random phase per path; bounce paths carry an extra reflection
/// loss. Rejects geometry whose delays would alias (>= 1/delta_f).
pub fn generate_paths(
    ue_pos: &Point2,
    config: &ScenarioConfig,
    scatterers: &[Point2],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<PathComponent>>> {
    const MIN_DIST: f64 = 1e-6;
    let max_delay = config.max_delay();
    let mut all = Vec::with_capacity(config.n_bs);
    for (b, bs) in config.bs_positions.iter().enumerate() {
        let orient = config.bs_orientations[b];
        let mut paths = Vec::with_capacity(1 + scatterers.len());

        let d_los = ue_pos.dist(bs);
        if d_los < MIN_DIST {
            return Err(Error::DegenerateGeometry(format!(
                "user position ({}, {}) coincides with BS {b}",
                ue_pos.x, ue_pos.y
            )));
        }
        let delay = d_los / SPEED_OF_LIGHT;
        if delay >= max_delay {
            return Err(Error::DegenerateGeometry(format!(
                "LOS delay {delay:.3e}s exceeds unambiguous range {max_delay:.3e}s at BS {b}"
            )));
        }
        let aoa = wrap_angle(bs.bearing_to(ue_pos) - orient);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        paths.push(PathComponent {
            gain: Complex64::from_polar(1.0 / d_los, theta),
            delay,
            aoa,
        });

        for s in scatterers {
            let d_in = ue_pos.dist(s);
            let d_out = s.dist(bs);
            if d_in < MIN_DIST || d_out < MIN_DIST {
                return Err(Error::DegenerateGeometry(format!(
                    "scatterer ({}, {}) coincides with the user or BS {b}",
                    s.x, s.y
                )));
            }
            let total = d_in + d_out;
            let delay = total / SPEED_OF_LIGHT;
            if delay >= max_delay {
                return Err(Error::DegenerateGeometry(format!(
                    "bounce delay {delay:.3e}s exceeds unambiguous range {max_delay:.3e}s at BS {b}"
                )));
            }
            let aoa = wrap_angle(bs.bearing_to(s) - orient);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            paths.push(PathComponent {
                gain: Complex64::from_polar(REFLECTION_LOSS / total, theta),
                delay,
                aoa,
            });
        }
        all.push(paths);
    }
    Ok(all)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Delay-domain view of a CSI tensor: per (bs, rx) row, the inverse DFT along
/// subcarriers with 1/N_SC scaling. Shape is unchanged.
pub fn to_delay_domain(csi: &CsiTensor) -> CsiTensor {
    let mut out = csi.clone();
    for row in out.data.chunks_mut(csi.n_sc) {
        idft_row_scaled(row);
    }
    out
}

/// How user positions are drawn in `generate_dataset`.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum SamplingMode {
    /// Independent uniform draws over the area.
    Uniform,
    /// Smooth random walk: fixed step length, heading evolves by small
    /// Gaussian turns, steps leaving the area are re-drawn.
    RandomWalk { step: f64 },
}

/// Scene scatterer positions for the configured seed. Scatterers are scene
/// furniture: fixed across all samples of a dataset.
pub fn scene_scatterers(config: &ScenarioConfig) -> Vec<Point2> {
    let mut rng = rng::stream(config.rng_seed, "scatterers");
    (0..config.n_scatterers)
        .map(|_| config.area.sample_uniform(&mut rng))
        .collect()
}

/// Generate a labeled dataset. Deterministic for a fixed config seed: the
/// scatterers, the position sequence, and each sample's path phases and noise
/// all come from independent seeded streams, so samples can be synthesized in
/// parallel without affecting the output.
pub fn generate_dataset(
    config: &ScenarioConfig,
    n_samples: usize,
    mode: SamplingMode,
) -> Result<Vec<LabeledSample>> {
    config.validate()?;
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let scatterers = scene_scatterers(config);
    let positions = draw_positions(config, n_samples, mode);

    positions
        .into_par_iter()
        .enumerate()
        .map(|(i, position)| {
            let mut rng = rng::indexed_stream(config.rng_seed, "sample", i as u64);
            let paths = generate_paths(&position, config, &scatterers, &mut rng)?;
            let csi = synth_channel(&paths, config, &mut rng)?;
            Ok(LabeledSample { csi, position })
        })
        .collect()
}

fn draw_positions(config: &ScenarioConfig, n: usize, mode: SamplingMode) -> Vec<Point2> {
    match mode {
        SamplingMode::Uniform => (0..n)
            .map(|i| {
                let mut rng = rng::indexed_stream(config.rng_seed, "position", i as u64);
                config.area.sample_uniform(&mut rng)
            })
            .collect(),
        SamplingMode::RandomWalk { step } => {
            let mut rng = rng::stream(config.rng_seed, "walk");
            let turn = Normal::new(0.0, 0.4).expect("finite std");
            let mut pos = config.area.sample_uniform(&mut rng);
            let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut out = Vec::with_capacity(n);
            out.push(pos);
            while out.len() < n {
                let mut accepted = false;
                for _ in 0..64 {
                    heading += turn.sample(&mut rng);
                    let cand = Point2::new(
                        pos.x + step * heading.cos(),
                        pos.y + step * heading.sin(),
                    );
                    if config.area.contains(&cand) {
                        pos = cand;
                        accepted = true;
                        break;
                    }
                    // Bounce off the wall and try again.
                    heading += std::f64::consts::FRAC_PI_2;
                }
                if !accepted {
                    pos = config.area.sample_uniform(&mut rng);
                }
                out.push(pos);
            }
            out
        }
    }
}

// --- CSIDS1 dataset file format -------------------------------------------
//
// header: magic "CSIDS1", u32 n_samples, u32 n_bs, u32 n_rx, u32 n_sc (LE)
// per sample: position as 2 x f32, then n_bs*n_rx*n_sc interleaved (re, im)
// f32 pairs in (bs, rx, sc) row-major order.

const CSIDS_MAGIC: &[u8] = b"CSIDS1";

/// Write a dataset in the "CSIDS1" binary format.
pub fn write_csids<P: AsRef<Path>>(path: P, samples: &[LabeledSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Config("cannot write an empty dataset".into()));
    }
    let (n_bs, n_rx, n_sc) = samples[0].csi.shape();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CSIDS_MAGIC)?;
    write_u32(&mut w, samples.len() as u32)?;
    write_u32(&mut w, n_bs as u32)?;
    write_u32(&mut w, n_rx as u32)?;
    write_u32(&mut w, n_sc as u32)?;
    for s in samples {
        if s.csi.shape() != (n_bs, n_rx, n_sc) {
            return Err(Error::ShapeMismatch {
                op: "write_csids",
                detail: format!("sample shape {:?} != {:?}", s.csi.shape(), (n_bs, n_rx, n_sc)),
            });
        }
        write_f32(&mut w, s.position.x as f32)?;
        write_f32(&mut w, s.position.y as f32)?;
        for c in &s.csi.data {
            write_f32(&mut w, c.re as f32)?;
            write_f32(&mut w, c.im as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a "CSIDS1" dataset file.
pub fn read_csids<P: AsRef<Path>>(path: P) -> Result<Vec<LabeledSample>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, CSIDS_MAGIC, "CSIDS1")?;
    let n_samples = read_u32(&mut r)? as usize;
    let n_bs = read_u32(&mut r)? as usize;
    let n_rx = read_u32(&mut r)? as usize;
    let n_sc = read_u32(&mut r)? as usize;
    let entries = n_bs * n_rx * n_sc;
    if entries == 0 || n_samples == 0 {
        return Err(Error::Format("CSIDS1 header has zero-sized dimensions".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = read_f32(&mut r)? as f64;
        let y = read_f32(&mut r)? as f64;
        let mut csi = CsiTensor::zeros(n_bs, n_rx, n_sc);
        for v in csi.data.iter_mut() {
            let re = read_f32(&mut r)? as f64;
            let im = read_f32(&mut r)? as f64;
            *v = Complex64::new(re, im);
        }
        samples.push(LabeledSample {
            csi,
            position: Point2::new(x, y),
        });
    }
    // Trailing data means the header lied.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("CSIDS1 file has trailing bytes".into()));
    }
    Ok(samples)
}

// --- flat key=value scenario config ----------------------------------------

/// Parse `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {raw:?}",
                lineno + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key {key}: cannot parse {v:?}")))
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

/// Parse semicolon-separated "x,y" pairs, e.g. `-2,10; 22,10`.
fn parse_points(key: &str, v: &str) -> Result<Vec<Point2>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(';')
        .map(|pair| {
            let nums = parse_f64_list(key, pair)?;
            if nums.len() != 2 {
                return Err(Error::Config(format!(
                    "key {key}: point {pair:?} must be x,y"
                )));
            }
            Ok(Point2::new(nums[0], nums[1]))
        })
        .collect()
}

impl ScenarioConfig {
    /// Apply one `key=value` setting. Returns false for keys this config does
    /// not own, so callers can layer their own keys on the same file.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_bs" => self.n_bs = parse_num(key, value)?,
            "n_rx" => self.n_rx = parse_num(key, value)?,
            "n_sc" => self.n_sc = parse_num(key, value)?,
            "carrier_freq_hz" => self.carrier_freq = parse_num(key, value)?,
            "subcarrier_spacing_hz" => self.subcarrier_spacing = parse_num(key, value)?,
            "antenna_spacing_over_lambda" => {
                self.antenna_spacing_over_lambda = parse_num(key, value)?
            }
            "area" => {
                let nums = parse_f64_list(key, value)?;
                if nums.len() != 4 {
                    return Err(Error::Config(format!(
                        "key {key}: expected min_x,min_y,max_x,max_y"
                    )));
                }
                self.area = Rect::new(nums[0], nums[1], nums[2], nums[3]);
            }
            "bs_positions" => self.bs_positions = parse_points(key, value)?,
            "bs_orientations" => self.bs_orientations = parse_f64_list(key, value)?,
            "n_scatterers" => self.n_scatterers = parse_num(key, value)?,
            "noise_std" => self.noise_std = parse_num(key, value)?,
            "rng_seed" => self.rng_seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serialize to the flat key=value form accepted by `set_key`.
    pub fn to_kv_string(&self) -> String {
        let points = self
            .bs_positions
            .iter()
            .map(|p| format!("{},{}", p.x, p.y))
            .collect::<Vec<_>>()
            .join(";");
        let orients = self
            .bs_orientations
            .iter()
            .map(|o| o.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "n_bs={}\nn_rx={}\nn_sc={}\ncarrier_freq_hz={}\nsubcarrier_spacing_hz={}\n\
             antenna_spacing_over_lambda={}\narea={},{},{},{}\nbs_positions={}\n\
             bs_orientations={}\nn_scatterers={}\nnoise_std={}\nrng_seed={}\n",
            self.n_bs,
            self.n_rx,
            self.n_sc,
            self.carrier_freq,
            self.subcarrier_spacing,
            self.antenna_spacing_over_lambda,
            self.area.min.x,
            self.area.min.y,
            self.area.max.x,
            self.area.max.y,
            points,
            orients,
            self.n_scatterers,
            self.noise_std,
            self.rng_seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn capprox(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn array_response_broadside_is_all_ones() {
        let v = array_response(0.0, 4, 0.5);
        for e in v {
            assert!(capprox(e, Complex64::new(1.0, 0.0), 1e-15));
        }
    }

    #[test]
    fn array_response_endfire_half_wavelength() {
        let v = array_response(std::f64::consts::FRAC_PI_2, 2, 0.5);
        assert!(capprox(v[0], Complex64::new(1.0, 0.0), 1e-15));
        assert!(capprox(v[1], Complex64::new(-1.0, 0.0), 1e-12));
    }

    #[test]
    fn array_response_matches_direct_formula() {
        // sin(pi/6) = 0.5 -> phases 0, -pi/2, -pi for half-wavelength spacing
        let v = array_response(std::f64::consts::FRAC_PI_6, 3, 0.5);
        for (m, e) in v.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * 0.5 * m as f64 * 0.5;
            let want = (Complex64::i() * phase).exp();
            assert!(capprox(*e, want, 1e-12), "element {m}: {e} vs {want}");
        }
        assert!(capprox(v[1], Complex64::new(0.0, -1.0), 1e-12));
        assert!(capprox(v[2], Complex64::new(-1.0, 0.0), 1e-12));
    }

    #[test]
    fn array_response_unit_magnitude() {
        for &aoa in &[-1.2, -0.3, 0.0, 0.7, 1.4] {
            for e in array_response(aoa, 6, 0.5) {
                assert!(approx(e.norm(), 1.0, 1e-14));
            }
        }
    }

    fn noiseless_config() -> ScenarioConfig {
        ScenarioConfig {
            noise_std: 0.0,
            ..ScenarioConfig::desk_default()
        }
    }

    #[test]
    fn synth_single_zero_delay_broadside_path_is_all_ones() {
        let cfg = noiseless_config();
        let paths: Vec<Vec<PathComponent>> = (0..cfg.n_bs)
            .map(|_| {
                vec![PathComponent {
                    gain: Complex64::new(1.0, 0.0),
                    delay: 0.0,
                    aoa: 0.0,
                }]
            })
            .collect();
        let mut rng = stream(0, "test");
        let csi = synth_channel(&paths, &cfg, &mut rng).unwrap();
        for c in &csi.data {
            assert!(capprox(*c, Complex64::new(1.0, 0.0), 1e-12));
        }
    }

    #[test]
    fn synth_zero_paths_is_all_zeros() {
        let cfg = noiseless_config();
        let paths = vec![Vec::new(); cfg.n_bs];
        let mut rng = stream(0, "test");
        let csi = synth_channel(&paths, &cfg, &mut rng).unwrap();
        assert!(csi.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn synth_matches_scalar_reimplementation() {
        let mut cfg = noiseless_config();
        cfg.n_bs = 1;
        cfg.bs_positions.truncate(1);
        cfg.bs_orientations.truncate(1);
        let tau = 1.0 / (cfg.n_sc as f64 * cfg.subcarrier_spacing);
        let paths = vec![vec![
            PathComponent {
                gain: Complex64::new(1.0, 0.0),
                delay: tau,
                aoa: 0.0,
            },
            PathComponent {
                gain: Complex64::new(0.4, -0.2),
                delay: 2.5 * tau,
                aoa: 0.6,
            },
        ]];
        let mut rng = stream(0, "test");
        let csi = synth_channel(&paths, &cfg, &mut rng).unwrap();
        // Independent scalar evaluation, one entry at a time.
        for m in 0..cfg.n_rx {
            for l in 0..cfg.n_sc {
                let f_l = cfg.carrier_freq + l as f64 * cfg.subcarrier_spacing;
                let mut want = Complex64::new(0.0, 0.0);
                for p in &paths[0] {
                    let steer = (Complex64::i()
                        * (-2.0
                            * std::f64::consts::PI
                            * cfg.antenna_spacing_over_lambda
                            * m as f64
                            * p.aoa.sin()))
                    .exp();
                    let rot = (Complex64::i() * (-2.0 * std::f64::consts::PI * f_l * p.delay)).exp();
                    want += p.gain * rot * steer;
                }
                assert!(
                    capprox(csi.at(0, m, l), want, 1e-9),
                    "entry ({m},{l}): {} vs {want}",
                    csi.at(0, m, l)
                );
            }
        }
    }

    #[test]
    fn synth_is_linear_in_gains() {
        let cfg = noiseless_config();
        let mk = |g1: Complex64, g2: Complex64| -> Vec<Vec<PathComponent>> {
            (0..cfg.n_bs)
                .map(|b| {
                    vec![
                        PathComponent { gain: g1, delay: 3e-8 * (b + 1) as f64, aoa: 0.3 },
                        PathComponent { gain: g2, delay: 5e-8, aoa: -0.8 },
                    ]
                })
                .collect()
        };
        let mut rng = stream(0, "test");
        let a = synth_channel(&mk(Complex64::new(1.0, 0.5), Complex64::new(-0.2, 0.1)), &cfg, &mut rng).unwrap();
        let b = synth_channel(&mk(Complex64::new(0.3, -0.9), Complex64::new(0.7, 0.4)), &cfg, &mut rng).unwrap();
        let sum = synth_channel(
            &mk(Complex64::new(1.3, -0.4), Complex64::new(0.5, 0.5)),
            &cfg,
            &mut rng,
        )
        .unwrap();
        for i in 0..a.data.len() {
            assert!(capprox(a.data[i] + b.data[i], sum.data[i], 1e-12));
        }
    }

    #[test]
    fn synth_rejects_wrong_bs_count() {
        let cfg = noiseless_config();
        let mut rng = stream(0, "test");
        let err = synth_channel(&[Vec::new()], &cfg, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn los_delay_is_distance_over_c() {
        let mut cfg = noiseless_config();
        cfg.n_bs = 1;
        cfg.bs_positions = vec![Point2::new(0.0, 0.0)];
        cfg.bs_orientations = vec![0.0];
        let ue = Point2::new(3.0, 0.0);
        let mut rng = stream(0, "test");
        let paths = generate_paths(&ue, &cfg, &[], &mut rng).unwrap();
        assert_eq!(paths[0].len(), 1);
        assert_eq!(paths[0][0].delay, 1e-8);
    }

    #[test]
    fn los_aoa_zero_on_broadside_axis() {
        let mut cfg = noiseless_config();
        cfg.n_bs = 1;
        cfg.bs_positions = vec![Point2::new(0.0, 0.0)];
        cfg.bs_orientations = vec![std::f64::consts::FRAC_PI_4];
        let r = 5.0 / 2f64.sqrt();
        let ue = Point2::new(r, r); // exactly along the orientation bearing
        let mut rng = stream(0, "test");
        let paths = generate_paths(&ue, &cfg, &[], &mut rng).unwrap();
        assert!(approx(paths[0][0].aoa, 0.0, 1e-12));
    }

    #[test]
    fn bounce_delay_from_hand_triangle() {
        // UE at origin, scatterer 3 m up, BS 4 m right of the scatterer:
        // legs 3 m and 4 m -> total 7 m.
        let mut cfg = noiseless_config();
        cfg.n_bs = 1;
        cfg.bs_positions = vec![Point2::new(4.0, 3.0)];
        cfg.bs_orientations = vec![0.0];
        let ue = Point2::new(0.0, 0.0);
        let sc = Point2::new(0.0, 3.0);
        let mut rng = stream(0, "test");
        let paths = generate_paths(&ue, &cfg, &[sc], &mut rng).unwrap();
        assert_eq!(paths[0].len(), 2);
        let bounce = &paths[0][1];
        assert!(approx(bounce.delay, 7.0 / SPEED_OF_LIGHT, 1e-20));
        assert!(approx(bounce.gain.norm(), REFLECTION_LOSS / 7.0, 1e-15));
        // Last hop arrives from the scatterer: bearing(BS -> scatterer) = pi.
        assert!(approx(bounce.aoa, std::f64::consts::PI, 1e-12));
    }

    #[test]
    fn ue_on_bs_is_degenerate() {
        let cfg = noiseless_config();
        let ue = cfg.bs_positions[0];
        let mut rng = stream(0, "test");
        let err = generate_paths(&ue, &cfg, &[], &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateGeometry(_)));
    }

    #[test]
    fn delay_domain_of_flat_spectrum_is_impulse() {
        let mut csi = CsiTensor::zeros(1, 2, 8);
        for v in csi.data.iter_mut() {
            *v = Complex64::new(1.0, 0.0);
        }
        let d = to_delay_domain(&csi);
        for m in 0..2 {
            assert!(capprox(d.at(0, m, 0), Complex64::new(1.0, 0.0), 1e-12));
            for t in 1..8 {
                assert!(d.at(0, m, t).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn delay_domain_recovers_impulse_at_tap_two() {
        // Row = forward DFT of a unit impulse at tap 2: H_l = e^{-j2pi*2l/N}.
        let n = 16;
        let mut csi = CsiTensor::zeros(1, 1, n);
        for l in 0..n {
            let ph = -2.0 * std::f64::consts::PI * (2 * l) as f64 / n as f64;
            *csi.at_mut(0, 0, l) = Complex64::from_polar(1.0, ph);
        }
        let d = to_delay_domain(&csi);
        for t in 0..n {
            let want = if t == 2 { 1.0 } else { 0.0 };
            assert!(approx(d.at(0, 0, t).re, want, 1e-12));
            assert!(d.at(0, 0, t).im.abs() < 1e-12);
        }
    }

    #[test]
    fn delay_domain_roundtrip_against_naive_forward_dft() {
        let mut rng = stream(11, "roundtrip");
        let mut csi = CsiTensor::zeros(2, 3, 32);
        for v in csi.data.iter_mut() {
            *v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let d = to_delay_domain(&csi);
        // Forward DFT (sum with e^{-j...}, no scaling) must reproduce the input.
        let mut max_rel = 0.0f64;
        for b in 0..2 {
            for m in 0..3 {
                for l in 0..32 {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for t in 0..32 {
                        let ph = -2.0 * std::f64::consts::PI * (l * t) as f64 / 32.0;
                        acc += d.at(b, m, t) * Complex64::from_polar(1.0, ph);
                    }
                    let rel = (acc - csi.at(b, m, l)).norm() / csi.at(b, m, l).norm().max(1e-30);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        assert!(max_rel < 1e-10, "max relative error {max_rel}");
    }

    #[test]
    fn dataset_is_reproducible_and_in_bounds() {
        let mut cfg = noiseless_config();
        cfg.noise_std = 0.01;
        let a = generate_dataset(&cfg, 20, SamplingMode::Uniform).unwrap();
        let b = generate_dataset(&cfg, 20, SamplingMode::Uniform).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.csi.data, y.csi.data);
        }
        for s in &a {
            assert!(cfg.area.contains(&s.position));
            assert!(s.csi.is_finite());
        }
    }

    #[test]
    fn random_walk_stays_in_bounds_with_configured_step() {
        let cfg = noiseless_config();
        let samples = generate_dataset(&cfg, 50, SamplingMode::RandomWalk { step: 0.5 }).unwrap();
        for s in &samples {
            assert!(cfg.area.contains(&s.position));
        }
        let mut max_step = 0.0f64;
        for w in samples.windows(2) {
            max_step = max_step.max(w[0].position.dist(&w[1].position));
        }
        // Steps are either the configured length or a teleport after 64
        // rejections, which the 20 m area makes essentially impossible.
        assert!(max_step < 0.5 + 1e-9, "max step {max_step}");
    }

    #[test]
    fn csids_roundtrip_preserves_f32_values() {
        let cfg = ScenarioConfig {
            n_bs: 1,
            n_rx: 2,
            n_sc: 4,
            bs_positions: vec![Point2::new(-1.0, 5.0)],
            bs_orientations: vec![0.0],
            ..ScenarioConfig::desk_default()
        };
        let samples = generate_dataset(&cfg, 3, SamplingMode::Uniform).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csids");
        write_csids(&path, &samples).unwrap();
        let back = read_csids(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.position.x as f32, b.position.x as f32);
            for (u, v) in a.csi.data.iter().zip(&b.csi.data) {
                assert_eq!(u.re as f32, v.re as f32);
                assert_eq!(u.im as f32, v.im as f32);
            }
        }
    }

    #[test]
    fn csids_write_is_byte_stable() {
        let cfg = noiseless_config();
        let samples = generate_dataset(&cfg, 2, SamplingMode::Uniform).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csids");
        let p2 = dir.path().join("b.csids");
        write_csids(&p1, &samples).unwrap();
        write_csids(&p2, &samples).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = ScenarioConfig::desk_default();
        let text = cfg.to_kv_string();
        let mut parsed = ScenarioConfig::desk_default();
        parsed.n_bs = 0; // ensure fields actually get set
        parsed.bs_positions.clear();
        parsed.bs_orientations.clear();
        for (k, v) in parse_kv(&text).unwrap() {
            assert!(parsed.set_key(&k, &v).unwrap(), "unknown key {k}");
        }
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn kv_rejects_malformed_lines() {
        assert!(parse_kv("this is not a kv line").is_err());
    }
}
