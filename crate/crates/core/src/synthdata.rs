//! Seeded synthetic scenes (filled colored rectangles over uniform noise),
//! center-in-box label assignment and the on-disk PPM + JSON dataset format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_one, AnchorGrid, BBox};
use crate::losses::LabelMap;
use crate::numerics::Grid2;

/// First seed of the validation range; training scenes use `[0, N)`.
pub const VAL_BASE_SEED: u64 = 1_000_000;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{} bytes for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_token = |bytes: &[u8]| -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::parse("ppm header", "truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = next_token(bytes)?;
        if magic != "P6" {
            return Err(Error::parse("ppm magic", format!("expected P6, found {magic}")));
        }
        let parse_num = |field: &str, tok: String| -> Result<usize> {
            tok.parse()
                .map_err(|_| Error::parse(field, format!("not a number: {tok}")))
        };
        let width = parse_num("ppm width", next_token(bytes)?)?;
        let height = parse_num("ppm height", next_token(bytes)?)?;
        let maxval = parse_num("ppm maxval", next_token(bytes)?)?;
        if maxval != 255 {
            return Err(Error::parse("ppm maxval", format!("only 255 is supported, found {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let need = width * height * 3;
        if bytes.len() < start + need {
            return Err(Error::parse("ppm raster", "truncated pixel data"));
        }
        Self::from_raw(width, height, bytes[start..start + need].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    /// Background noise is uniform in `[0, noise_amp]` per channel.
    pub noise_amp: u8,
    pub stride: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Relative per-channel color perturbation of each object.
    pub color_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_classes: 3,
            max_objects: 3,
            noise_amp: 96,
            stride: 8,
            min_size: 16,
            max_size: 20,
            color_jitter: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes == 0 {
            return bad("num_classes must be ≥ 1".into());
        }
        if self.max_objects == 0 {
            return bad("max_objects must be ≥ 1".into());
        }
        if self.stride == 0 || !self.width.is_multiple_of(self.stride) || !self.height.is_multiple_of(self.stride) {
            return bad(format!(
                "stride {} must divide image {}x{}",
                self.stride, self.width, self.height
            ));
        }
        if self.min_size < 2 * self.stride {
            return bad(format!(
                "min_size {} must be ≥ 2·stride = {}",
                self.min_size,
                2 * self.stride
            ));
        }
        if self.max_size < self.min_size {
            return bad(format!("max_size {} < min_size {}", self.max_size, self.min_size));
        }
        if self.max_size > self.width || self.max_size > self.height {
            return bad(format!(
                "max_size {} does not fit in a {}x{} image",
                self.max_size, self.width, self.height
            ));
        }
        if !(0.0..1.0).contains(&self.color_jitter) {
            return bad(format!("color_jitter {} must be in [0, 1)", self.color_jitter));
        }
        Ok(())
    }

    /// Canonical color of a class: evenly spaced hues at fixed saturation/value.
    pub fn class_color(&self, class_id: usize) -> [f64; 3] {
        let hue = class_id as f64 / self.num_classes as f64 * 6.0;
        let (s, v) = (0.75, 0.9);
        let c = v * s;
        let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
        let m = v - c;
        let (r, g, b) = match hue as usize {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
    }
}

/// Deterministic in `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = RgbImage::new(spec.width, spec.height);
    for px in image.data.iter_mut() {
        *px = rng.gen_range(0..=spec.noise_amp);
    }

    let count = rng.gen_range(1..=spec.max_objects);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.num_classes);
        let w = rng.gen_range(spec.min_size..=spec.max_size);
        let h = rng.gen_range(spec.min_size..=spec.max_size);
        let x1 = rng.gen_range(0..=spec.width - w);
        let y1 = rng.gen_range(0..=spec.height - h);
        let base = spec.class_color(class_id);
        let mut color = [0u8; 3];
        for (dst, b) in color.iter_mut().zip(base) {
            let factor = 1.0 + rng.gen_range(-spec.color_jitter..=spec.color_jitter);
            *dst = (b * factor).round().clamp(0.0, 255.0) as u8;
        }
        // Later objects paint over earlier ones.
        for y in y1..y1 + h {
            for x in x1..x1 + w {
                image.put_pixel(x, y, color);
            }
        }
        objects.push(SceneObject {
            class_id,
            bbox: BBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64)?,
        });
    }
    Ok(Scene { image, objects })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignedTargets {
    pub labels: LabelMap,
    pub box_targets: Vec<Option<BBox>>,
    pub positive_mask: Vec<bool>,
}

impl AssignedTargets {
    pub fn positive_count(&self) -> usize {
        self.positive_mask.iter().filter(|&&p| p).count()
    }
}

/// An anchor is positive for the smallest box strictly containing its
/// center; equal areas go to the lower object index.
pub fn assign_labels(scene: &Scene, anchors: &AnchorGrid, num_classes: usize) -> Result<AssignedTargets> {
    let mut classes = Vec::with_capacity(anchors.len());
    let mut box_targets = Vec::with_capacity(anchors.len());
    for &(cx, cy) in anchors.points() {
        let best = scene
            .objects
            .iter()
            .filter(|o| o.bbox.contains_strictly(cx, cy))
            .fold(None::<&SceneObject>, |best, o| match best {
                Some(b) if b.bbox.area() <= o.bbox.area() => Some(b),
                _ => Some(o),
            });
        classes.push(best.map(|o| o.class_id));
        box_targets.push(best.map(|o| o.bbox));
    }
    let positive_mask = classes.iter().map(Option::is_some).collect();
    Ok(AssignedTargets {
        labels: LabelMap::from_classes(num_classes, &classes)?,
        box_targets,
        positive_mask,
    })
}

/// Offsets that decode exactly to each positive's target box; zero rows
/// elsewhere.
pub fn regression_targets_to_offsets(anchors: &AnchorGrid, targets: &AssignedTargets) -> Result<Grid2> {
    let mut out = Grid2::zeros(anchors.len(), 4);
    for (i, t) in targets.box_targets.iter().enumerate() {
        if let Some(b) = t {
            let o = encode_one(anchors.points()[i], anchors.stride(), b)?;
            out.row_mut(i).copy_from_slice(&o);
        }
    }
    Ok(out)
}

/// A list of scenes generated from consecutive seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub base_seed: u64,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Scene `i` is generated from seed `base_seed + i`.
    pub fn generate(spec: &SceneSpec, base_seed: u64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidSpec("dataset must contain at least one scene".into()));
        }
        let scenes = (0..count as u64)
            .map(|i| generate_scene(base_seed + i, spec))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            base_seed,
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationObject {
    class: usize,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationScene {
    idx: usize,
    objects: Vec<AnnotationObject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotations {
    scenes: Vec<AnnotationScene>,
    spec: SceneSpec,
    base_seed: u64,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";

pub fn scene_file_name(idx: usize) -> String {
    format!("scene_{idx}.ppm")
}

/// Writes `scene_<idx>.ppm` files plus `annotations.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (idx, scene) in dataset.scenes.iter().enumerate() {
        let path = dir.join(scene_file_name(idx));
        fs::write(&path, scene.image.to_ppm()).map_err(|e| Error::io(&path, e))?;
    }
    let ann = Annotations {
        scenes: dataset
            .scenes
            .iter()
            .enumerate()
            .map(|(idx, s)| AnnotationScene {
                idx,
                objects: s
                    .objects
                    .iter()
                    .map(|o| AnnotationObject {
                        class: o.class_id,
                        x1: o.bbox.x1,
                        y1: o.bbox.y1,
                        x2: o.bbox.x2,
                        y2: o.bbox.y2,
                    })
                    .collect(),
            })
            .collect(),
        spec: dataset.spec.clone(),
        base_seed: dataset.base_seed,
    };
    let path = dir.join(ANNOTATIONS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &ann)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let ann: Annotations =
        serde_json::from_str(&text).map_err(|e| Error::parse(ANNOTATIONS_FILE, e.to_string()))?;
    let mut scenes = Vec::with_capacity(ann.scenes.len());
    for (pos, s) in ann.scenes.iter().enumerate() {
        if s.idx != pos {
            return Err(Error::parse(
                format!("scenes[{pos}].idx"),
                format!("expected {pos}, found {}", s.idx),
            ));
        }
        let img_path = dir.join(scene_file_name(s.idx));
        let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let image = RgbImage::from_ppm(&bytes)?;
        let objects = s
            .objects
            .iter()
            .enumerate()
            .map(|(j, o)| {
                if o.class >= ann.spec.num_classes {
                    return Err(Error::parse(
                        format!("scenes[{pos}].objects[{j}].class"),
                        format!("class {} ≥ num_classes {}", o.class, ann.spec.num_classes),
                    ));
                }
                let bbox = BBox::new(o.x1, o.y1, o.x2, o.y2)
                    .map_err(|e| Error::parse(format!("scenes[{pos}].objects[{j}]"), e.to_string()))?;
                Ok(SceneObject { class_id: o.class, bbox })
            })
            .collect::<Result<_>>()?;
        scenes.push(Scene { image, objects });
    }
    Ok(Dataset {
        spec: ann.spec,
        base_seed: ann.base_seed,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_anchor_grid, decode_one};

    fn scene_with(objects: Vec<(usize, BBox)>) -> Scene {
        Scene {
            image: RgbImage::new(64, 64),
            objects: objects
                .into_iter()
                .map(|(class_id, bbox)| SceneObject { class_id, bbox })
                .collect(),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(17, &spec).unwrap(), generate_scene(17, &spec).unwrap());
        assert_ne!(generate_scene(17, &spec).unwrap().image, generate_scene(18, &spec).unwrap().image);
    }

    #[test]
    fn single_object_spec() {
        let spec = SceneSpec {
            max_objects: 1,
            ..SceneSpec::default()
        };
        for seed in 0..50 {
            assert_eq!(generate_scene(seed, &spec).unwrap().objects.len(), 1);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let too_big = SceneSpec {
            min_size: 80,
            max_size: 90,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(0, &too_big), Err(Error::InvalidSpec(_))));
        let too_small = SceneSpec {
            min_size: 8,
            ..SceneSpec::default()
        };
        assert!(too_small.validate().is_err());
        assert!(matches!(
            Dataset::generate(&SceneSpec::default(), 0, 0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn scenes_respect_invariants_and_have_positives() {
        let spec = SceneSpec::default();
        let anchors = build_anchor_grid(spec.width, spec.height, spec.stride).unwrap();
        let mut fractions = Vec::new();
        for seed in 0..1000 {
            let scene = generate_scene(seed, &spec).unwrap();
            assert!((1..=spec.max_objects).contains(&scene.objects.len()));
            for o in &scene.objects {
                assert!(o.bbox.x1 >= 0.0 && o.bbox.y1 >= 0.0);
                assert!(o.bbox.x2 <= 64.0 && o.bbox.y2 <= 64.0);
                assert!(o.bbox.width() >= 16.0 && o.bbox.height() >= 16.0);
            }
            let t = assign_labels(&scene, &anchors, spec.num_classes).unwrap();
            assert!(t.positive_count() >= 1, "seed {seed}");
            fractions.push(t.positive_count() as f64 / anchors.len() as f64);
        }
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        assert!(mean < 0.30, "mean positive fraction {mean}");
    }

    #[test]
    fn class_frequencies_are_near_uniform() {
        let spec = SceneSpec::default();
        let mut counts = vec![0usize; spec.num_classes];
        for seed in 0..1000 {
            for o in generate_scene(seed, &spec).unwrap().objects {
                counts[o.class_id] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let expected = total as f64 / spec.num_classes as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // χ²(df=2) at p = 0.001 is 13.82.
        assert!(chi2 < 13.82, "chi2={chi2} counts={counts:?}");
        for &c in &counts {
            assert!((c as f64 - expected).abs() <= 0.1 * expected, "{counts:?}");
        }
    }

    #[test]
    fn assignment_rules() {
        let anchors = build_anchor_grid(64, 64, 8).unwrap();
        let small = BBox::new(16.0, 16.0, 26.0, 26.0).unwrap(); // area 100
        let big = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap(); // area 400
        let lone = BBox::new(40.0, 40.0, 58.0, 58.0).unwrap();
        let scene = scene_with(vec![(0, big), (1, small), (2, lone)]);
        let t = assign_labels(&scene, &anchors, 3).unwrap();
        let idx = |cx: f64, cy: f64| anchors.points().iter().position(|&p| p == (cx, cy)).unwrap();

        // (20,20) lies in both nested boxes: the smaller one wins.
        assert_eq!(t.labels.grid().row(idx(20.0, 20.0)), &[0.0, 1.0, 0.0]);
        assert_eq!(t.box_targets[idx(20.0, 20.0)], Some(small));
        // (12,12) only in the big box.
        assert_eq!(t.labels.grid().row(idx(12.0, 12.0)), &[1.0, 0.0, 0.0]);
        // (44,52) inside the class-2 box only.
        assert_eq!(t.labels.grid().row(idx(44.0, 52.0)), &[0.0, 0.0, 1.0]);
        // (4,4) inside nothing.
        assert_eq!(t.labels.grid().row(idx(4.0, 4.0)), &[0.0, 0.0, 0.0]);
        assert!(t.box_targets[idx(4.0, 4.0)].is_none());
        for (i, &p) in t.positive_mask.iter().enumerate() {
            assert_eq!(p, t.box_targets[i].is_some());
            assert_eq!(p, t.labels.grid().row(i).contains(&1.0));
        }
    }

    #[test]
    fn equal_area_tie_goes_to_lower_index() {
        let anchors = build_anchor_grid(64, 64, 8).unwrap();
        let a = BBox::new(16.0, 16.0, 32.0, 32.0).unwrap();
        let b = BBox::new(18.0, 18.0, 34.0, 34.0).unwrap();
        let t = assign_labels(&scene_with(vec![(1, a), (2, b)]), &anchors, 3).unwrap();
        let i = anchors.points().iter().position(|&p| p == (20.0, 20.0)).unwrap();
        assert_eq!(t.box_targets[i], Some(a));
    }

    #[test]
    fn regression_offsets_round_trip() {
        let anchors = build_anchor_grid(64, 64, 8).unwrap();
        let i = anchors.points().iter().position(|&p| p == (20.0, 20.0)).unwrap();
        let one_stride = BBox::new(12.0, 12.0, 28.0, 28.0).unwrap();
        let t = assign_labels(&scene_with(vec![(0, one_stride)]), &anchors, 3).unwrap();
        let o = regression_targets_to_offsets(&anchors, &t).unwrap();
        assert_eq!(o.row(i), &[0.0; 4]);

        let two_left = BBox::new(4.0, 12.0, 28.0, 28.0).unwrap();
        let t = assign_labels(&scene_with(vec![(0, two_left)]), &anchors, 3).unwrap();
        let o = regression_targets_to_offsets(&anchors, &t).unwrap();
        assert!((o.get(i, 0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(&o.row(i)[1..], &[0.0; 3]);

        let spec = SceneSpec::default();
        for seed in 0..50 {
            let scene = generate_scene(seed, &spec).unwrap();
            let t = assign_labels(&scene, &anchors, 3).unwrap();
            let o = regression_targets_to_offsets(&anchors, &t).unwrap();
            for (k, target) in t.box_targets.iter().enumerate() {
                if let Some(b) = target {
                    let d = decode_one(anchors.points()[k], 8.0, o.row(k));
                    for (x, y) in [(d.x1, b.x1), (d.y1, b.y1), (d.x2, b.x2), (d.y2, b.y2)] {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn ppm_round_trip_and_errors() {
        let scene = generate_scene(3, &SceneSpec::default()).unwrap();
        let back = RgbImage::from_ppm(&scene.image.to_ppm()).unwrap();
        assert_eq!(back, scene.image);
        let with_comment = b"P6\n# made by hand\n2 1\n255\n\x01\x02\x03\x04\x05\x06";
        let img = RgbImage::from_ppm(with_comment).unwrap();
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
        assert!(matches!(RgbImage::from_ppm(b"P3\n1 1\n255\n"), Err(Error::Parse { .. })));
        assert!(RgbImage::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&SceneSpec::default(), 40, 5).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert!(dir.path().join("scene_4.ppm").exists());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn corrupted_annotations_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(&SceneSpec::default(), 0, 2).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join(ANNOTATIONS_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["scenes"][1]["objects"][0]["class"] = serde_json::json!(99);
        fs::write(&path, v.to_string()).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "scenes[1].objects[0].class"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
