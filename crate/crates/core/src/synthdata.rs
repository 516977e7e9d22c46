//! Procedural captioned scenes: one anti-aliased shape on a flat background.
//!
//! A [`SceneSpec`] renders deterministically to an [`Image`]; its attribute
//! tuple doubles as the caption ([`Caption`]) that conditions the denoiser.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Image, ImageDims};
use crate::rng;

/// Supersampling factor per axis used by the rasteriser.
pub const SUPERSAMPLE: usize = 4;
const SUBSAMPLES: usize = SUPERSAMPLE * SUPERSAMPLE;
/// Maximum sub-pixel jitter of the shape centre, in pixels.
pub const MAX_JITTER: f32 = 0.25;

macro_rules! attribute_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $label:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];
            pub const COUNT: usize = Self::ALL.len();

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).unwrap()
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $label),+ }
            }
        }

        impl std::str::FromStr for $name {
            type Err = crate::error::Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($label => Ok($name::$variant),)+
                    _ => Err(invalid(format!("unknown {} `{s}`", stringify!($name)))),
                }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

attribute_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle" });
attribute_enum!(ShapeColor { Red => "red", Green => "green", Blue => "blue", Yellow => "yellow" });
attribute_enum!(Background { White => "white", Black => "black", Gray => "gray" });

impl ShapeColor {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            ShapeColor::Red => [1.0, -1.0, -1.0],
            ShapeColor::Green => [-1.0, 1.0, -1.0],
            ShapeColor::Blue => [-1.0, -1.0, 1.0],
            ShapeColor::Yellow => [1.0, 1.0, -1.0],
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::White => [1.0; 3],
            Background::Black => [-1.0; 3],
            Background::Gray => [0.0; 3],
        }
    }
}

/// Discrete caption. `None` in a slot is that attribute's null token; the
/// all-`None` caption is the unconditional (null-text) condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caption {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_color: Option<ShapeColor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<Background>,
}

impl Caption {
    pub const NULL: Caption = Caption { shape: None, shape_color: None, background: None };

    pub fn null() -> Self {
        Self::NULL
    }

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }

    /// Slots set in `overrides` replace the corresponding slots of `self`.
    pub fn overridden(&self, overrides: &Caption) -> Caption {
        Caption {
            shape: overrides.shape.or(self.shape),
            shape_color: overrides.shape_color.or(self.shape_color),
            background: overrides.background.or(self.background),
        }
    }
}

/// Parses the display form, `<color> <shape> on <background>` with `_`
/// for a null slot, or `<null>`.
impl std::str::FromStr for Caption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "<null>" {
            return Ok(Caption::NULL);
        }
        let words: Vec<&str> = s.split_whitespace().collect();
        let [color, shape, "on", background] = words[..] else {
            return Err(invalid(format!("caption `{s}` is not of the form `<color> <shape> on <background>`")));
        };
        fn slot<T: std::str::FromStr<Err = Error>>(w: &str) -> Result<Option<T>> {
            if w == "_" { Ok(None) } else { w.parse().map(Some) }
        }
        Ok(Caption { shape: slot(shape)?, shape_color: slot(color)?, background: slot(background)? })
    }
}

impl std::fmt::Display for Caption {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_null() {
            return f.write_str("<null>");
        }
        let opt = |o: Option<&'static str>| o.unwrap_or("_");
        write!(
            f,
            "{} {} on {}",
            opt(self.shape_color.map(|c| c.name())),
            opt(self.shape.map(|s| s.name())),
            opt(self.background.map(|b| b.name()))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub shape_color: ShapeColor,
    pub background: Background,
    /// Integer pixel centre `(x, y)`.
    pub center: (usize, usize),
    pub radius: usize,
    pub jitter_seed: u64,
}

impl SceneSpec {
    pub fn caption(&self) -> Caption {
        Caption {
            shape: Some(self.shape),
            shape_color: Some(self.shape_color),
            background: Some(self.background),
        }
    }

    pub fn with_shape(mut self, shape: Shape) -> Self {
        self.shape = shape;
        self
    }

    pub fn with_color(mut self, color: ShapeColor) -> Self {
        self.shape_color = color;
        self
    }

    pub fn with_background(mut self, background: Background) -> Self {
        self.background = background;
        self
    }

    /// The shape must fit with room for the jitter on every side.
    pub fn validate(&self, canvas: ImageDims) -> Result<()> {
        if canvas.channels != 3 {
            return Err(invalid(format!("canvas must have 3 channels, got {}", canvas.channels)));
        }
        if self.radius == 0 {
            return Err(invalid("shape radius must be at least 1 pixel"));
        }
        let (cx, cy) = self.center;
        let r = self.radius;
        let fits = |c: usize, extent: usize| c >= r && c + r < extent;
        if !fits(cx, canvas.width) || !fits(cy, canvas.height) {
            return Err(invalid(format!(
                "shape at ({cx}, {cy}) with radius {r} does not fit a {canvas} canvas"
            )));
        }
        Ok(())
    }

    fn jitter(&self) -> (f32, f32) {
        let mut r = rng::rng(self.jitter_seed);
        (r.gen_range(-MAX_JITTER..=MAX_JITTER), r.gen_range(-MAX_JITTER..=MAX_JITTER))
    }

    /// Continuous centre in pixel coordinates (pixel `i` spans `[i, i + 1)`).
    pub fn continuous_center(&self) -> (f32, f32) {
        let (jx, jy) = self.jitter();
        (self.center.0 as f32 + 0.5 + jx, self.center.1 as f32 + 0.5 + jy)
    }

    fn contains(&self, dx: f32, dy: f32) -> bool {
        let r = self.radius as f32;
        match self.shape {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                // equal-area square
                let s = r * std::f32::consts::PI.sqrt() / 2.0;
                dx.abs() <= s && dy.abs() <= s
            }
            Shape::Triangle => {
                // equilateral, apex up, circumradius r
                let h = 3.0f32.sqrt();
                dy <= r / 2.0 && h * dx - dy <= r && -h * dx - dy <= r
            }
        }
    }

    /// Number of supersamples (out of 16) covered by the shape, per pixel.
    fn coverage(&self, canvas: ImageDims) -> Vec<u8> {
        let (ccx, ccy) = self.continuous_center();
        let mut cov = vec![0u8; canvas.pixels()];
        let step = 1.0 / SUPERSAMPLE as f32;
        for y in 0..canvas.height {
            for x in 0..canvas.width {
                let mut n = 0u8;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f32 + (sx as f32 + 0.5) * step;
                        let py = y as f32 + (sy as f32 + 0.5) * step;
                        if self.contains(px - ccx, py - ccy) {
                            n += 1;
                        }
                    }
                }
                cov[y * canvas.width + x] = n;
            }
        }
        cov
    }
}

/// Render a scene: box-filtered 4×4 supersampling of the shape over the background.
pub fn gen_image(spec: &SceneSpec, canvas: ImageDims) -> Result<Image> {
    spec.validate(canvas)?;
    let cov = spec.coverage(canvas);
    let fg = spec.shape_color.rgb();
    let bg = spec.background.rgb();
    let mut img = Image::zeros(canvas);
    for c in 0..3 {
        for (p, &n) in cov.iter().enumerate() {
            let a = f32::from(n) / SUBSAMPLES as f32;
            img.data_mut()[c * canvas.pixels() + p] = bg[c] + a * (fg[c] - bg[c]);
        }
    }
    Ok(img)
}

/// The scene's background with no shape drawn.
pub fn render_background(background: Background, canvas: ImageDims) -> Image {
    let bg = background.rgb();
    let mut img = Image::zeros(canvas);
    for c in 0..canvas.channels.min(3) {
        img.data_mut()[c * canvas.pixels()..(c + 1) * canvas.pixels()].fill(bg[c]);
    }
    img
}

/// Boolean on-target (shape) / off-target (background) partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    height: usize,
    width: usize,
    mask: Vec<bool>,
}

impl EditMask {
    pub fn new(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(invalid("mask size does not match its dimensions"));
        }
        let area = mask.iter().filter(|&&m| m).count();
        if area == 0 || area == mask.len() {
            return Err(invalid(format!("mask area {area} must be strictly between 0 and {}", mask.len())));
        }
        Ok(Self { height, width, mask })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn off_target_area(&self) -> usize {
        self.mask.len() - self.area()
    }

    pub fn union(&self, other: &EditMask) -> Result<EditMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(invalid("mask dimensions differ"));
        }
        let mask = self.mask.iter().zip(&other.mask).map(|(&a, &b)| a || b).collect();
        EditMask::new(self.height, self.width, mask)
    }
}

/// Pixels whose supersampled shape coverage is at least one half.
pub fn mask_of(spec: &SceneSpec, canvas: ImageDims) -> Result<EditMask> {
    spec.validate(canvas)?;
    let half = (SUBSAMPLES / 2) as u8;
    let mask = spec.coverage(canvas).into_iter().map(|n| n >= half).collect();
    EditMask::new(canvas.height, canvas.width, mask)
}

/// Pixels with any shape coverage, anti-aliased edges included.
pub fn support_of(spec: &SceneSpec, canvas: ImageDims) -> Result<EditMask> {
    spec.validate(canvas)?;
    let mask = spec.coverage(canvas).into_iter().map(|n| n > 0).collect();
    EditMask::new(canvas.height, canvas.width, mask)
}

/// Radius range used by the sampler for a given canvas.
pub fn radius_range(canvas: ImageDims) -> (usize, usize) {
    let m = canvas.height.min(canvas.width) as f32;
    let lo = ((0.25 * m).round() as usize).max(1);
    let hi = ((0.34 * m).round() as usize).max(lo);
    (lo, hi)
}

/// Draw a random valid scene from the item-level stream `seed`.
pub fn random_spec(seed: u64, canvas: ImageDims) -> SceneSpec {
    let mut r = rng::rng(seed);
    let shape = Shape::ALL[r.gen_range(0..Shape::COUNT)];
    let shape_color = ShapeColor::ALL[r.gen_range(0..ShapeColor::COUNT)];
    let background = Background::ALL[r.gen_range(0..Background::COUNT)];
    let (lo, hi) = radius_range(canvas);
    let radius = r.gen_range(lo..=hi);
    let cx = r.gen_range(radius..canvas.width - radius);
    let cy = r.gen_range(radius..canvas.height - radius);
    SceneSpec { shape, shape_color, background, center: (cx, cy), radius, jitter_seed: r.gen() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<(Image, SceneSpec)>,
    pub canvas: ImageDims,
    pub generator_seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &SceneSpec> {
        self.items.iter().map(|(_, s)| s)
    }
}

/// `n` scenes with uniformly drawn attributes. Item `i` depends only on
/// `(seed, i)`, so any prefix or parallel split reproduces the same items.
pub fn sample_dataset(seed: u64, n: usize, canvas: ImageDims) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let (lo, _) = radius_range(canvas);
    if canvas.width <= 2 * lo + 1 || canvas.height <= 2 * lo + 1 {
        return Err(invalid(format!("canvas {canvas} too small for the shape sampler")));
    }
    let items = (0..n)
        .map(|i| {
            let spec = random_spec(rng::derive_index(seed, i as u64), canvas);
            gen_image(&spec, canvas).map(|img| (img, spec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, canvas, generator_seed: seed })
}

/// Pair every image with another item's spec (a derangement via Sattolo's algorithm).
pub fn permute_captions(dataset: &Dataset, seed: u64) -> Result<Vec<(Image, SceneSpec)>> {
    let n = dataset.len();
    if n < 2 {
        return Err(invalid("caption permutation needs at least two items"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut r = rng::rng(seed);
    for i in (1..n).rev() {
        let j = r.gen_range(0..i);
        perm.swap(i, j);
    }
    Ok(perm
        .iter()
        .enumerate()
        .map(|(i, &j)| (dataset.items[i].0.clone(), dataset.items[j].1))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    #[serde(flatten)]
    pub spec: SceneSpec,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub canvas: ImageDims,
    pub seed: u64,
    pub count: usize,
    pub items: Vec<ManifestItem>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn of(dataset: &Dataset) -> Self {
        Manifest {
            canvas: dataset.canvas,
            seed: dataset.generator_seed,
            count: dataset.len(),
            items: dataset
                .items
                .iter()
                .enumerate()
                .map(|(i, (_, spec))| ManifestItem { spec: *spec, file: format!("item_{i:05}.png") })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text)?;
        if m.items.len() != m.count {
            return Err(invalid(format!("manifest count {} but {} items", m.count, m.items.len())));
        }
        Ok(m)
    }
}

/// Write `manifest.json` and one PNG per item into `dir`.
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::of(dataset);
    for ((img, _), item) in dataset.items.iter().zip(&manifest.items) {
        img.save_png(dir.join(&item.file))?;
    }
    fs::write(dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::from_json(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let items = manifest
        .items
        .iter()
        .map(|item| {
            item.spec.validate(manifest.canvas)?;
            let img = Image::load_png(dir.join(&item.file))?;
            if img.dims() != manifest.canvas {
                return Err(invalid(format!("{} has dims {}, manifest says {}", item.file, img.dims(), manifest.canvas)));
            }
            Ok((img, item.spec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items, canvas: manifest.canvas, generator_seed: manifest.seed })
}
