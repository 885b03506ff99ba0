//! Effective and theoretical receptive fields.

use crate::error::{Error, Result};
use crate::model::{Layer, Sequential};
use crate::rng::{gaussian_from, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default support threshold, as a fraction of the peak.
pub const DEFAULT_TAU: f64 = 0.01;

/// Mean absolute input gradient of the center output position.
#[derive(Clone, Debug, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, all values `>= 0`.
    pub values: Vec<f64>,
    pub peak: f64,
    /// Probed output position `(y, x)`.
    pub center: (usize, usize),
}

impl ErfMap {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>, center: (usize, usize)) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Shape(format!("ERF values must be finite and >= 0, got {v}")));
        }
        let peak = values.iter().copied().fold(0.0, f64::max);
        Ok(ErfMap {
            height,
            width,
            values,
            peak,
            center,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Values divided by the peak (unchanged when the peak is zero).
    pub fn normalized(&self) -> ErfMap {
        let mut out = self.clone();
        if self.peak > 0.0 {
            out.values.iter_mut().for_each(|v| *v /= self.peak);
            out.peak = 1.0;
        }
        out
    }

    /// Bounding box `(y0, y1, x0, x1)` (inclusive) of strictly nonzero values.
    pub fn nonzero_bbox(&self) -> Option<(usize, usize, usize, usize)> {
        bbox(self, |v| v > 0.0)
    }
}

fn bbox(map: &ErfMap, keep: impl Fn(f64) -> bool) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..map.height {
        for x in 0..map.width {
            if keep(map.at(y, x)) {
                b = Some(match b {
                    None => (y, y, x, x),
                    Some((y0, y1, x0, x1)) => (y0.min(y), y1.max(y), x0.min(x), x1.max(x)),
                });
            }
        }
    }
    b
}

/// Probe `model` at the center output position.
///
/// Each trial draws a standard-normal input of shape `(1, C, H, W)`,
/// injects a unit gradient at the center pixel of every output channel and
/// accumulates `|∂/∂X|` averaged over input channels. Trials are averaged.
pub fn compute_erf<T: Scalar>(model: &Sequential<T>, input_shape: [usize; 3], trials: usize, seed: u64) -> Result<ErfMap> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let [c, h, w] = input_shape;
    model.output_channels(c)?;
    let center = (h / 2, w / 2);
    let mut rng = Rng::new(seed);
    let mut acc = vec![0.0f64; h * w];
    for trial in 0..trials {
        let x = gaussian_from::<T>(&mut rng, &[1, c, h, w], 0.0, 1.0)?;
        let (y, tape) = model.forward(&x)?;
        let (_, c_out, yh, yw) = y.dims4()?;
        if (yh, yw) != (h, w) {
            return Err(Error::Shape("model must preserve spatial extents".into()));
        }
        let mut g = Tensor::zeros_like(&y);
        for v in 0..c_out {
            g.set(&[0, v, center.0, center.1], T::one());
        }
        let (gx, _) = model.backward(&g, &tape)?;
        if gx.first_non_finite().is_some() {
            return Err(Error::NonFinite {
                stage: format!("input gradient in ERF trial {trial}"),
            });
        }
        for u in 0..c {
            for (a, &v) in acc.iter_mut().zip(&gx.data()[u * h * w..(u + 1) * h * w]) {
                *a += v.as_f64().abs();
            }
        }
    }
    let scale = 1.0 / (c * trials) as f64;
    ErfMap::from_values(h, w, acc.into_iter().map(|v| v * scale).collect(), center)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErfMetrics {
    pub tau: f64,
    pub support_area: usize,
    pub extent_y: usize,
    pub extent_x: usize,
    pub equivalent_radius: f64,
    /// Set when the map is identically zero; all other fields are then zero.
    pub all_zero: bool,
}

/// Support `{v >= τ·peak}` (ties included), its bounding box and the radius
/// of the disc with the same area.
pub fn erf_metrics(map: &ErfMap, tau: f64) -> Result<ErfMetrics> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    if map.peak <= 0.0 {
        return Ok(ErfMetrics {
            tau,
            support_area: 0,
            extent_y: 0,
            extent_x: 0,
            equivalent_radius: 0.0,
            all_zero: true,
        });
    }
    let cut = tau * map.peak;
    let support_area = map.values.iter().filter(|&&v| v >= cut).count();
    let (y0, y1, x0, x1) = bbox(map, |v| v >= cut).expect("peak is in the support");
    Ok(ErfMetrics {
        tau,
        support_area,
        extent_y: y1 - y0 + 1,
        extent_x: x1 - x0 + 1,
        equivalent_radius: (support_area as f64 / std::f64::consts::PI).sqrt(),
        all_zero: false,
    })
}

/// Closed interval of input offsets, relative to an output position, that
/// can influence it along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interval {
    pub lo: isize,
    pub hi: isize,
}

impl Interval {
    pub const POINT: Interval = Interval { lo: 0, hi: 0 };

    pub fn symmetric(radius: isize) -> Self {
        Interval { lo: -radius, hi: radius }
    }

    /// Minkowski sum: dependency through two stages in series.
    pub fn then(self, other: Interval) -> Self {
        Interval {
            lo: self.lo + other.lo,
            hi: self.hi + other.hi,
        }
    }

    /// Hull: dependency through parallel paths.
    pub fn hull(self, other: Interval) -> Self {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn extent(self) -> usize {
        (self.hi - self.lo + 1) as usize
    }
}

/// Dependency interval of a `k`-wide shape-preserving convolution.
pub fn conv_interval(k: usize) -> Interval {
    Interval::symmetric((k / 2) as isize)
}

/// Input offsets reached by the sampling stage alone: sampled centers
/// `(α - ⌊s/2⌋)γ` widened by the kernel window.
pub fn sampling_interval(k: usize, samples: usize, stride: usize) -> Interval {
    Interval::symmetric(((samples / 2) * stride) as isize).then(conv_interval(k))
}

/// Dependency interval of one block input → block output. The feature
/// branch is read through the sampling stage, the kernel branch and
/// sample attention at the output position, position attention at the
/// sampled centers.
pub fn lsdfn_interval(config: &crate::layer::LsDfnConfig) -> Interval {
    let bk = conv_interval(config.branch_kernel_size);
    let branch = (0..config.branch_depth).fold(Interval::POINT, |acc, _| acc.then(bk));
    let centers = Interval::symmetric(((config.samples / 2) * config.sample_stride) as isize);
    let feature = bk.then(sampling_interval(config.kernel_size, config.samples, config.sample_stride));
    let mut total = feature.hull(branch);
    if config.uses_attention() {
        total = total.hull(centers.then(branch));
    }
    total
}

/// Theoretical footprint of a whole stack.
pub fn model_interval<T: Scalar>(model: &Sequential<T>) -> Interval {
    model.layers.iter().fold(Interval::POINT, |acc, layer| match layer {
        Layer::Conv(p) => acc.then(conv_interval(p.kernel_size())),
        Layer::Relu => acc,
        Layer::LsDfn { config, skip_concat, .. } => {
            let block = lsdfn_interval(config);
            acc.then(if *skip_concat { block.hull(Interval::POINT) } else { block })
        }
    })
}

/// 8-bit binary PGM. With `normalize` the peak maps to 255, otherwise values
/// are clamped to `[0, 1]` and scaled by 255.
pub fn erf_to_pgm(map: &ErfMap, normalize: bool) -> Vec<u8> {
    let scale = if normalize && map.peak > 0.0 { 1.0 / map.peak } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(
        map.values
            .iter()
            .map(|&v| ((v * scale).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Parsed PGM header and pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: usize,
    pub pixels: Vec<u8>,
}

/// Parse a binary PGM (`P5`, maxval ≤ 255, `#` comments allowed in the
/// header).
pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let bad = |m: &str| Error::Shape(format!("PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or(&[]).to_vec();
    if pixels.len() != width * height {
        return Err(bad("pixel count mismatch"));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        pixels,
    })
}

/// Standard deviation of the random weights in probe stacks.
pub const PROBE_WEIGHT_STD: f64 = 0.3;

/// Stacks probed by the ERF tool.
#[derive(Clone, Debug, PartialEq)]
pub enum ErfStack {
    /// `depth` shared `k×k` convolutions with ReLU in between.
    Conv { depth: usize, kernel_size: usize },
    /// A single block, no skip path.
    Lsdfn(crate::layer::LsDfnConfig),
}

impl ErfStack {
    pub fn label(&self) -> String {
        match self {
            ErfStack::Conv { depth, kernel_size } => format!("conv{kernel_size}x{depth}"),
            ErfStack::Lsdfn(c) => format!("lsdfn_s{}_g{}_k{}", c.samples, c.sample_stride, c.kernel_size),
        }
    }
}

/// Random-weight probe network over `channels` input channels.
pub fn build_erf_stack(stack: &ErfStack, channels: usize, seed: u64) -> Result<Sequential<f64>> {
    let mut rng = Rng::new(seed);
    let layers = match stack {
        ErfStack::Conv { depth, kernel_size } => {
            if *depth == 0 {
                return Err(Error::Config("conv depth must be >= 1".into()));
            }
            let mut layers = Vec::new();
            for d in 0..*depth {
                if d > 0 {
                    layers.push(Layer::Relu);
                }
                layers.push(Layer::Conv(crate::conv::ConvParams::gaussian(
                    &mut rng,
                    channels,
                    channels,
                    *kernel_size,
                    PROBE_WEIGHT_STD,
                )?));
            }
            layers
        }
        ErfStack::Lsdfn(config) => {
            if config.in_channels != channels {
                return Err(Error::Config(format!(
                    "block expects {} input channels, stack has {channels}",
                    config.in_channels
                )));
            }
            vec![Layer::LsDfn {
                params: crate::layer::LsDfnParams::random(config, &mut rng, PROBE_WEIGHT_STD)?,
                config: config.clone(),
                skip_concat: false,
            }]
        }
    };
    let model = Sequential::new(layers);
    model.output_channels(channels)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(h: usize, w: usize, y: usize, x: usize) -> ErfMap {
        let mut v = vec![0.0; h * w];
        v[y * w + x] = 0.7;
        ErfMap::from_values(h, w, v, (y, x)).unwrap()
    }

    #[test]
    fn delta_metrics() {
        let m = erf_metrics(&delta(5, 6, 2, 3), 0.5).unwrap();
        assert_eq!((m.support_area, m.extent_y, m.extent_x), (1, 1, 1));
        assert!(!m.all_zero);
    }

    #[test]
    fn uniform_metrics() {
        let map = ErfMap::from_values(4, 7, vec![0.3; 28], (2, 3)).unwrap();
        for tau in [0.01, 0.5, 0.99] {
            assert_eq!(erf_metrics(&map, tau).unwrap().support_area, 28);
        }
    }

    #[test]
    fn zero_map_flagged() {
        let map = ErfMap::from_values(3, 3, vec![0.0; 9], (1, 1)).unwrap();
        let m = erf_metrics(&map, 0.1).unwrap();
        assert!(m.all_zero);
        assert_eq!(m.support_area, 0);
        assert!(erf_to_pgm(&map, true).ends_with(&[0; 9]));
    }

    #[test]
    fn tau_outside_unit_interval_rejected() {
        let map = delta(3, 3, 1, 1);
        assert!(erf_metrics(&map, 0.0).is_err());
        assert!(erf_metrics(&map, 1.0).is_err());
    }

    #[test]
    fn delta_image_is_single_white_pixel() {
        let pgm = parse_pgm(&erf_to_pgm(&delta(3, 4, 1, 2), true)).unwrap();
        assert_eq!((pgm.width, pgm.height, pgm.maxval), (4, 3, 255));
        let white: Vec<usize> = (0..12).filter(|&i| pgm.pixels[i] == 255).collect();
        assert_eq!(white, vec![6]);
        assert_eq!(pgm.pixels.iter().filter(|&&p| p == 0).count(), 11);
    }

    #[test]
    fn negative_values_rejected() {
        assert!(ErfMap::from_values(1, 2, vec![0.0, -1.0], (0, 0)).is_err());
    }

    #[test]
    fn interval_arithmetic() {
        assert_eq!(conv_interval(3).then(conv_interval(3)).extent(), 5);
        assert_eq!(sampling_interval(3, 3, 2).extent(), 7);
        assert_eq!(Interval { lo: -1, hi: 4 }.hull(Interval::POINT), Interval { lo: -1, hi: 4 });
    }
}
