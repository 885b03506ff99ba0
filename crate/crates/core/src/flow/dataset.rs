//! Textured objects moving by integer displacements over a static
//! textured background.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    /// Every object draws its own displacement.
    Independent,
    /// One nonzero displacement per image; objects alternate its sign.
    Opposing,
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Motion::Independent => "independent",
            Motion::Opposing => "opposing",
        })
    }
}

impl FromStr for Motion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Motion::Independent),
            "opposing" => Ok(Motion::Opposing),
            _ => Err(Error::Config(format!("unknown motion {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub objects_per_image: usize,
    pub max_displacement: usize,
    pub motion: Motion,
    pub seed: u64,
    /// Object side lengths are drawn from `[min_object, max_object]`.
    pub min_object: usize,
    pub max_object: usize,
}

impl DatasetConfig {
    pub fn new(count: usize, height: usize, width: usize, objects_per_image: usize, max_displacement: usize, seed: u64) -> Self {
        let side = height.min(width);
        DatasetConfig {
            count,
            height,
            width,
            objects_per_image,
            max_displacement,
            motion: Motion::Independent,
            seed,
            min_object: (side / 5).max(2),
            max_object: (side / 3).max(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("dataset needs count, height and width >= 1".into()));
        }
        if self.objects_per_image == 0 {
            return Err(Error::Config("objects_per_image must be >= 1".into()));
        }
        if self.max_displacement > self.height.min(self.width) / 4 {
            return Err(Error::Config(format!(
                "max_displacement {} exceeds min(H, W) / 4 = {}",
                self.max_displacement,
                self.height.min(self.width) / 4
            )));
        }
        if self.motion == Motion::Opposing && self.max_displacement == 0 {
            return Err(Error::Config("opposing motion needs max_displacement >= 1".into()));
        }
        if self.min_object == 0 || self.min_object > self.max_object {
            return Err(Error::Config("object size range is empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectShape {
    Rect,
    /// Ellipse inscribed in the bounding box.
    Disc,
}

/// One object: bounding box in the first frame, displacement and texture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectSpec {
    pub shape: ObjectShape,
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
    /// Horizontal displacement in pixels.
    pub du: i64,
    /// Vertical displacement in pixels.
    pub dv: i64,
    pub texture_seed: u64,
}

impl ObjectSpec {
    fn covers(&self, ly: usize, lx: usize) -> bool {
        match self.shape {
            ObjectShape::Rect => true,
            ObjectShape::Disc => {
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (ly as f64 + 0.5 - ry) / ry;
                let dx = (lx as f64 + 0.5 - rx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    /// `(1, H, W)` in `[0, 1]`.
    pub frame_a: Tensor<f32>,
    pub frame_b: Tensor<f32>,
    /// `(2, H, W)`: channel 0 is `du`, channel 1 is `dv`.
    pub flow_gt: Tensor<f32>,
    pub objects: Vec<ObjectSpec>,
}

/// Value noise in `[0, 1]`: uniform values on a grid of spacing `cell`,
/// bilinearly interpolated.
fn value_noise(rng: &mut Rng, h: usize, w: usize, cell: usize) -> Vec<f32> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.uniform()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

fn object_texture(spec: &ObjectSpec) -> Vec<f32> {
    let mut rng = Rng::new(spec.texture_seed);
    let coarse = value_noise(&mut rng, spec.height, spec.width, 3);
    coarse
        .into_iter()
        .map(|v| (0.1 + 0.8 * v + 0.1 * rng.uniform() as f32).min(1.0))
        .collect()
}

fn background(seed: u64, h: usize, w: usize) -> Vec<f32> {
    let mut rng = Rng::new(seed);
    value_noise(&mut rng, h, w, 8).into_iter().map(|v| 0.2 + 0.4 * v).collect()
}

fn placed(spec: &ObjectSpec, h: usize, w: usize, moved: bool) -> Result<(usize, usize)> {
    let (dy, dx) = if moved { (spec.dv, spec.du) } else { (0, 0) };
    let y = spec.y as i64 + dy;
    let x = spec.x as i64 + dx;
    if y < 0 || x < 0 || y as usize + spec.height > h || x as usize + spec.width > w {
        return Err(Error::Dataset(format!(
            "object at ({}, {}) size {}x{} displaced by ({}, {}) leaves the {h}x{w} frame",
            spec.y, spec.x, spec.height, spec.width, spec.du, spec.dv
        )));
    }
    Ok((y as usize, x as usize))
}

/// Render two frames and the ground-truth flow for explicit objects, drawn
/// in order (later objects occlude earlier ones).
pub fn render_scene(height: usize, width: usize, background_seed: u64, objects: &[ObjectSpec]) -> Result<FlowSample> {
    let bg = background(background_seed, height, width);
    let mut a = bg.clone();
    let mut b = bg;
    let mut flow = vec![0.0f32; 2 * height * width];
    let p = height * width;
    for spec in objects {
        if spec.height == 0 || spec.width == 0 {
            return Err(Error::Dataset("object with empty extent".into()));
        }
        let tex = object_texture(spec);
        let (ay, ax) = placed(spec, height, width, false)?;
        let (by, bx) = placed(spec, height, width, true)?;
        for ly in 0..spec.height {
            for lx in 0..spec.width {
                if !spec.covers(ly, lx) {
                    continue;
                }
                let t = tex[ly * spec.width + lx];
                let ia = (ay + ly) * width + ax + lx;
                a[ia] = t;
                flow[ia] = spec.du as f32;
                flow[p + ia] = spec.dv as f32;
                b[(by + ly) * width + bx + lx] = t;
            }
        }
    }
    Ok(FlowSample {
        frame_a: Tensor::new(&[1, height, width], a)?,
        frame_b: Tensor::new(&[1, height, width], b)?,
        flow_gt: Tensor::new(&[2, height, width], flow)?,
        objects: objects.to_vec(),
    })
}

const RETRIES: usize = 8;

fn draw_objects(config: &DatasetConfig, rng: &mut Rng) -> Result<Vec<ObjectSpec>> {
    let d = config.max_displacement as i64;
    let shared = loop {
        let du = rng.range_inclusive(-d, d);
        let dv = rng.range_inclusive(-d, d);
        if config.motion == Motion::Independent || du != 0 || dv != 0 {
            break (du, dv);
        }
    };
    let mut objects = Vec::with_capacity(config.objects_per_image);
    for j in 0..config.objects_per_image {
        let (du, dv) = match config.motion {
            Motion::Independent if j == 0 => shared,
            Motion::Independent => (rng.range_inclusive(-d, d), rng.range_inclusive(-d, d)),
            Motion::Opposing if j % 2 == 0 => shared,
            Motion::Opposing => (-shared.0, -shared.1),
        };
        let shape = if rng.below(2) == 0 { ObjectShape::Rect } else { ObjectShape::Disc };
        let span = (config.max_object - config.min_object + 1) as u64;
        let mut oh = config.min_object + rng.below(span) as usize;
        let mut ow = config.min_object + rng.below(span) as usize;
        let texture_seed = rng.next_u64();
        let mut attempt = 0;
        let (y, x) = loop {
            let fits = |len: usize, size: usize, shift: i64| -> Option<(i64, i64)> {
                let lo = (-shift).max(0);
                let hi = len as i64 - size as i64 - shift.max(0);
                (hi >= lo).then_some((lo, hi))
            };
            match (fits(config.height, oh, dv), fits(config.width, ow, du)) {
                (Some((ylo, yhi)), Some((xlo, xhi))) => {
                    break (rng.range_inclusive(ylo, yhi) as usize, rng.range_inclusive(xlo, xhi) as usize);
                }
                _ if attempt < RETRIES => {
                    attempt += 1;
                    oh = (oh * 3 / 4).max(1);
                    ow = (ow * 3 / 4).max(1);
                }
                _ => {
                    return Err(Error::Dataset(format!(
                        "object {j} with displacement ({du}, {dv}) does not fit a {}x{} frame after {RETRIES} shrinks",
                        config.height, config.width
                    )))
                }
            }
        };
        objects.push(ObjectSpec {
            shape,
            y,
            x,
            height: oh,
            width: ow,
            du,
            dv,
            texture_seed,
        });
    }
    Ok(objects)
}

fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Generate `count` samples; sample `i` depends only on `(seed, i)`.
pub fn gen_flow_dataset(config: &DatasetConfig) -> Result<Vec<FlowSample>> {
    config.validate()?;
    (0..config.count)
        .map(|i| {
            let mut rng = Rng::new(sample_seed(config.seed, i));
            let background_seed = rng.next_u64();
            let objects = draw_objects(config, &mut rng)?;
            render_scene(config.height, config.width, background_seed, &objects)
        })
        .collect()
}

/// Network inputs `(N, 2, H, W)` (both frames) and targets `(N, 2, H, W)`.
pub fn stack(samples: &[FlowSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Dataset("empty dataset".into()))?;
    let (h, w) = (first.frame_a.shape()[1], first.frame_a.shape()[2]);
    let mut inputs = Vec::with_capacity(samples.len() * 2 * h * w);
    let mut flows = Vec::with_capacity(samples.len() * 2 * h * w);
    for s in samples {
        if s.frame_a.shape() != [1, h, w] {
            return Err(Error::Shape("samples differ in size".into()));
        }
        inputs.extend_from_slice(s.frame_a.data());
        inputs.extend_from_slice(s.frame_b.data());
        flows.extend_from_slice(s.flow_gt.data());
    }
    Ok((
        Tensor::new(&[samples.len(), 2, h, w], inputs)?,
        Tensor::new(&[samples.len(), 2, h, w], flows)?,
    ))
}
