//! Labeled image sources: a deterministic synthetic shapes generator and a
//! VOC-style directory reader, plus train-time augmentation and export.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Rgb, Rgb32FImage};
use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::{write_mask, SegmentationMask};
use crate::tensor::Tensor;

pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

/// Image-level supervision: which of `C` classes appear in an image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiHotLabel {
    bits: Vec<bool>,
}

impl MultiHotLabel {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::invalid("multi-hot label needs at least one positive class"));
        }
        Ok(Self { bits })
    }

    pub fn from_classes(class_count: usize, classes: &[usize]) -> Result<Self> {
        let mut bits = vec![false; class_count];
        for &c in classes {
            if c >= class_count {
                return Err(Error::invalid(format!(
                    "class {c} out of range for {class_count} classes"
                )));
            }
            bits[c] = true;
        }
        Self::new(bits)
    }

    pub fn class_count(&self) -> usize {
        self.bits.len()
    }

    pub fn is_set(&self, class: usize) -> bool {
        self.bits.get(class).copied().unwrap_or(false)
    }

    pub fn positives(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
            .collect()
    }

    pub fn positive_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// An RGB image in `[0, 1]` (channel-major) with its multi-hot label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pixels: Array3<f64>,
    pub label: MultiHotLabel,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>, label: MultiHotLabel) -> Result<Self> {
        let id = id.into();
        if pixels.dim().0 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image `{id}` has {} channels, expected 3",
                pixels.dim().0
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("image `{id}` has pixels outside [0, 1]")));
        }
        Ok(Self { id, pixels, label })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// `(3, H, W)` tensor for the autodiff graph.
    pub fn to_tensor(&self) -> Tensor {
        let (c, h, w) = self.pixels.dim();
        Tensor::from_vec(&[c, h, w], self.pixels.iter().copied().collect())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        ImageBuffer::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            let px = |c| (self.pixels[[c, y as usize, x as usize]] * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub(crate) fn from_rgb8(id: String, img: &image::RgbImage, label: MultiHotLabel) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self::new(id, pixels, label)
    }
}

/// Anything that yields labeled images by index.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn class_names(&self) -> Vec<String>;

    fn class_count(&self) -> usize {
        self.class_names().len()
    }

    fn get(&self, index: usize) -> Result<LabeledImage>;

    /// Pixel-level ground truth, when the source has it.
    fn ground_truth(&self, index: usize) -> Result<Option<SegmentationMask>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub canvas_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Fraction of each shape covered by its class-coloured marker.
    pub marker_fraction: f64,
    /// Amplitude of the uniform noise on background pixels.
    pub background_noise: f64,
    /// Contrast of the class-oriented stripes on shape bodies. Zero gives
    /// plain gray bodies, so only the marker identifies the class.
    pub texture_contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            class_count: 3,
            canvas_size: 64,
            min_shapes: 1,
            max_shapes: 2,
            marker_fraction: 0.1,
            background_noise: 0.0,
            texture_contrast: 0.12,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 1 {
            return Err(Error::invalid("synthetic class_count must be at least 1"));
        }
        if !(self.marker_fraction > 0.0 && self.marker_fraction < 1.0) {
            return Err(Error::invalid("synthetic marker_fraction must lie in (0, 1)"));
        }
        if self.min_shapes < 1 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("synthetic shape range must satisfy 1 <= min <= max"));
        }
        if self.max_shapes > self.class_count {
            return Err(Error::invalid(
                "synthetic max_shapes cannot exceed class_count (one shape per class)",
            ));
        }
        if !(0.0..=1.0).contains(&self.background_noise) {
            return Err(Error::invalid("synthetic background_noise must lie in [0, 1]"));
        }
        if !(0.0..=0.5).contains(&self.texture_contrast) {
            return Err(Error::invalid("synthetic texture_contrast must lie in [0, 0.5]"));
        }
        if self.canvas_size < 8 {
            return Err(Error::invalid("synthetic canvas_size must be at least 8"));
        }
        Ok(())
    }
}

/// One placed shape, as recorded by the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub class: usize,
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub area: usize,
    pub marker_area: usize,
}

const MARKER_PALETTE: [[f64; 3]; 6] = [
    [0.95, 0.10, 0.10],
    [0.10, 0.90, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
];

fn inside(kind: usize, size: usize, y: usize, x: usize) -> bool {
    let s = size as f64;
    let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
    match kind {
        0 => true,
        1 => {
            let r = s / 2.0;
            (fy - r).powi(2) + (fx - r).powi(2) <= r * r
        }
        _ => {
            // upward-pointing triangle spanning the box
            let half = fy / s * (s / 2.0);
            (fx - s / 2.0).abs() <= half
        }
    }
}

const STRIPE_PERIOD: f64 = 4.0;

/// +-1 stripe pattern whose orientation depends on the class.
fn stripe(class: usize, class_count: usize, y: usize, x: usize) -> f64 {
    let theta = std::f64::consts::PI * class as f64 / class_count as f64;
    let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / STRIPE_PERIOD;
    if (t * std::f64::consts::TAU).sin() >= 0.0 { 1.0 } else { -1.0 }
}

/// Generate image `index` of a synthetic dataset together with its
/// pixel-level ground truth and the placement log.
///
/// Shape geometry is drawn independently of the class; class evidence is the
/// marker colour and, when `texture_contrast > 0`, the stripe orientation.
pub fn generate_synthetic_logged(
    spec: &SyntheticSpec,
    index: u64,
) -> Result<(LabeledImage, SegmentationMask, Vec<PlacedShape>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let side = spec.canvas_size;
    let mut pixels = Array3::from_shape_fn((3, side, side), |_| 0.0);
    for v in pixels.iter_mut() {
        *v = rng.random_range(0.0..1.0) * spec.background_noise;
    }
    let mut labels = Array2::<u8>::zeros((side, side));

    let n = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut classes: Vec<usize> = (0..spec.class_count).collect();
    classes.shuffle(&mut rng);
    classes.truncate(n);

    let grid = (n as f64).sqrt().ceil() as usize;
    let cell = side / grid;
    let mut cells: Vec<usize> = (0..grid * grid).collect();
    cells.shuffle(&mut rng);

    let mut log = Vec::with_capacity(n);
    for (k, &class) in classes.iter().enumerate() {
        let (cy, cx) = (cells[k] / grid * cell, cells[k] % grid * cell);
        let lo = ((cell as f64 * 0.55) as usize).max(4).min(cell);
        let hi = ((cell as f64 * 0.9) as usize).max(lo);
        let size = rng.random_range(lo..=hi);
        let top = cy + rng.random_range(0..=cell - size);
        let left = cx + rng.random_range(0..=cell - size);
        let kind = rng.random_range(0..3);
        let gray: f64 = rng.random_range(0.55..0.85);

        let mut body: Vec<(usize, usize)> = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if inside(kind, size, y, x) {
                    body.push((top + y, left + x));
                }
            }
        }
        // marker: the shape pixels closest to the box's top-left corner
        let marker_area = ((body.len() as f64 * spec.marker_fraction).round() as usize)
            .clamp(1, body.len().saturating_sub(1).max(1));
        let mut order = body.clone();
        order.sort_by_key(|&(y, x)| ((y - top) + (x - left), y, x));
        let marker = &order[..marker_area];

        let color = MARKER_PALETTE[class % MARKER_PALETTE.len()];
        for &(y, x) in &body {
            labels[[y, x]] = (class + 1) as u8;
            let jitter: f64 = rng.random_range(-0.03..0.03);
            let v = gray + spec.texture_contrast * stripe(class, spec.class_count, y, x) + jitter;
            for c in 0..3 {
                pixels[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
        for &(y, x) in marker {
            for (c, &v) in color.iter().enumerate() {
                pixels[[c, y, x]] = v;
            }
        }
        log.push(PlacedShape {
            class,
            top,
            left,
            size,
            area: body.len(),
            marker_area,
        });
    }
    classes.sort_unstable();
    let label = MultiHotLabel::from_classes(spec.class_count, &classes)?;
    let image = LabeledImage::new(format!("synth_{:06}", index), pixels, label)?;
    let mask = SegmentationMask::new(labels, spec.class_count)?;
    Ok((image, mask, log))
}

pub fn generate_synthetic(spec: &SyntheticSpec, index: u64) -> Result<(LabeledImage, SegmentationMask)> {
    generate_synthetic_logged(spec, index).map(|(i, m, _)| (i, m))
}

/// A contiguous range of synthetic indices generated on demand.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub start: u64,
    pub count: usize,
}

impl SyntheticDataset {
    pub fn new(spec: SyntheticSpec, start: u64, count: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, start, count })
    }
}

impl Dataset for SyntheticDataset {
    fn len(&self) -> usize {
        self.count
    }

    fn class_names(&self) -> Vec<String> {
        (0..self.spec.class_count).map(|c| format!("shape{c}")).collect()
    }

    fn get(&self, index: usize) -> Result<LabeledImage> {
        generate_synthetic(&self.spec, self.start + index as u64).map(|(img, _)| img)
    }

    fn ground_truth(&self, index: usize) -> Result<Option<SegmentationMask>> {
        generate_synthetic(&self.spec, self.start + index as u64).map(|(_, m)| Some(m))
    }
}

/// Directory layout: `images/<id>.jpg` (or `.png`), `labels.txt` with
/// `<id> <class>[,<class>...]` lines, `splits/<split>.txt` one id per line,
/// and optionally `masks/<id>.png`.
#[derive(Clone, Debug)]
pub struct VocDataset {
    root: PathBuf,
    ids: Vec<String>,
    labels: Vec<MultiHotLabel>,
    class_names: Vec<String>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parse a `labels.txt` body into `(id, class names)` pairs.
pub fn parse_label_listing(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = match line.split_once(char::is_whitespace) {
            Some((id, rest)) => (id, rest.trim()),
            None => (line, ""),
        };
        let id = id.trim_end_matches(':');
        if id.is_empty() {
            return Err(Error::Parse {
                what: "label listing",
                line: i + 1,
                reason: "missing id".into(),
            });
        }
        let rest = rest.trim_start_matches('[').trim_end_matches(']');
        let classes = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        out.push((id.to_string(), classes));
    }
    Ok(out)
}

impl VocDataset {
    pub fn open(root: impl AsRef<Path>, split: &str) -> Result<Self> {
        Self::open_with_classes(root, split, VOC_CLASSES.iter().map(|s| s.to_string()).collect())
    }

    pub fn open_with_classes(root: impl AsRef<Path>, split: &str, class_names: Vec<String>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let listing = parse_label_listing(&read_to_string(&root.join("labels.txt"))?)?;
        let by_id: std::collections::HashMap<_, _> = listing.into_iter().collect();
        let split_text = read_to_string(&root.join("splits").join(format!("{split}.txt")))?;
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for id in split_text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let names = by_id.get(id).ok_or_else(|| Error::Parse {
                what: "split list",
                line: ids.len() + 1,
                reason: format!("id `{id}` has no entry in labels.txt"),
            })?;
            if names.is_empty() {
                return Err(Error::EmptyLabel(id.to_string()));
            }
            let mut classes = Vec::with_capacity(names.len());
            for n in names {
                let c = class_names
                    .iter()
                    .position(|k| k == n)
                    .ok_or_else(|| Error::UnknownClass(n.clone()))?;
                classes.push(c);
            }
            labels.push(MultiHotLabel::from_classes(class_names.len(), &classes)?);
            ids.push(id.to_string());
        }
        Ok(Self {
            root,
            ids,
            labels,
            class_names,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn image_path(&self, id: &str) -> Result<PathBuf> {
        let dir = self.root.join("images");
        for ext in ["jpg", "png"] {
            let p = dir.join(format!("{id}.{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(Error::MissingImage {
            id: id.to_string(),
            dir,
        })
    }
}

impl Dataset for VocDataset {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    fn get(&self, index: usize) -> Result<LabeledImage> {
        let id = &self.ids[index];
        let path = self.image_path(id)?;
        let img = image::open(&path)?.to_rgb8();
        LabeledImage::from_rgb8(id.clone(), &img, self.labels[index].clone())
    }

    fn ground_truth(&self, index: usize) -> Result<Option<SegmentationMask>> {
        let path = self.root.join("masks").join(format!("{}.png", self.ids[index]));
        if !path.is_file() {
            return Ok(None);
        }
        crate::segmentation::read_mask(&path, self.class_names.len()).map(Some)
    }
}

/// Read every image of a VOC-style split into memory.
pub fn load_voc_style(root: impl AsRef<Path>, split: &str) -> Result<Vec<LabeledImage>> {
    let ds = VocDataset::open(root, split)?;
    (0..ds.len()).map(|i| ds.get(i)).collect()
}

/// Random draw of one resize-and-crop augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    /// Crop origin as a fraction of the available slack, in `[0, 1]`.
    pub offset_y: f64,
    pub offset_x: f64,
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        scale: 1.0,
        offset_y: 0.0,
        offset_x: 0.0,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, scale_range: (f64, f64), allow_flip: bool) -> Self {
        Self {
            scale: rng.random_range(scale_range.0..=scale_range.1),
            offset_y: rng.random_range(0.0..=1.0),
            offset_x: rng.random_range(0.0..=1.0),
            flip: allow_flip && rng.random_bool(0.5),
        }
    }
}

pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.5, 2.0);

/// Resize by `draw.scale`, zero-pad to at least `crop`, then cut a
/// `crop x crop` window. The label is carried over unchanged.
pub fn apply_augment(img: &LabeledImage, crop: usize, draw: AugmentDraw) -> Result<LabeledImage> {
    if crop == 0 {
        return Err(Error::invalid("crop must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    let nh = ((h as f64 * draw.scale).round() as usize).max(1);
    let nw = ((w as f64 * draw.scale).round() as usize).max(1);
    let mut resized = if (nh, nw) == (h, w) {
        img.pixels.clone()
    } else {
        let buf: Rgb32FImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                img.pixels[[0, y, x]] as f32,
                img.pixels[[1, y, x]] as f32,
                img.pixels[[2, y, x]] as f32,
            ])
        });
        let out = imageops::resize(&buf, nw as u32, nh as u32, imageops::FilterType::Triangle);
        Array3::from_shape_fn((3, nh, nw), |(c, y, x)| {
            (out.get_pixel(x as u32, y as u32)[c] as f64).clamp(0.0, 1.0)
        })
    };
    if draw.flip {
        resized.invert_axis(ndarray::Axis(2));
    }
    let (ph, pw) = (nh.max(crop), nw.max(crop));
    let mut padded = Array3::<f64>::zeros((3, ph, pw));
    padded.slice_mut(s![.., ..nh, ..nw]).assign(&resized);
    let oy = ((ph - crop) as f64 * draw.offset_y.clamp(0.0, 1.0)).round() as usize;
    let ox = ((pw - crop) as f64 * draw.offset_x.clamp(0.0, 1.0)).round() as usize;
    let cropped = padded.slice(s![.., oy..oy + crop, ox..ox + crop]).to_owned();
    LabeledImage::new(img.id.clone(), cropped, img.label.clone())
}

/// Random resize in [0.5, 2] followed by a `crop x crop` window.
pub fn augment_train<R: Rng + ?Sized>(
    img: &LabeledImage,
    crop: usize,
    rng: &mut R,
    allow_flip: bool,
) -> Result<LabeledImage> {
    let draw = AugmentDraw::sample(rng, DEFAULT_SCALE_RANGE, allow_flip);
    apply_augment(img, crop, draw)
}

/// Write a dataset split in the VOC-style layout, including `masks/` when
/// ground truth exists. Existing `labels.txt` entries for other ids are kept.
pub fn export_dataset(ds: &dyn Dataset, root: impl AsRef<Path>, split: &str) -> Result<usize> {
    let root = root.as_ref();
    for sub in ["images", "masks", "splits"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let names = ds.class_names();
    let labels_path = root.join("labels.txt");
    let mut listing: Vec<(String, Vec<String>)> = if labels_path.is_file() {
        parse_label_listing(&read_to_string(&labels_path)?)?
    } else {
        Vec::new()
    };
    let mut split_ids = String::new();
    for i in 0..ds.len() {
        let img = ds.get(i)?;
        let path = root.join("images").join(format!("{}.png", img.id));
        img.to_rgb8().save(&path)?;
        if let Some(mask) = ds.ground_truth(i)? {
            write_mask(&mask, root.join("masks").join(format!("{}.png", img.id)))?;
        }
        let classes = img.label.positives().iter().map(|&c| names[c].clone()).collect();
        listing.retain(|(id, _)| id != &img.id);
        listing.push((img.id.clone(), classes));
        split_ids.push_str(&img.id);
        split_ids.push('\n');
    }
    let mut text = String::new();
    for (id, classes) in &listing {
        text.push_str(&format!("{id} {}\n", classes.join(",")));
    }
    fs::write(&labels_path, text).map_err(|e| Error::io(&labels_path, e))?;
    let split_path = root.join("splits").join(format!("{split}.txt"));
    let mut f = fs::File::create(&split_path).map_err(|e| Error::io(&split_path, e))?;
    f.write_all(split_ids.as_bytes())
        .map_err(|e| Error::io(&split_path, e))?;
    Ok(ds.len())
}
