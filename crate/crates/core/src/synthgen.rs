//! Deterministic synthetic scenes with dense ground truth and point labels.
//!
//! A scene is a class-0 background with axis-aligned rectangles and ellipses
//! of the remaining classes painted on top in generation order. Each class
//! owns a fixed mean color; pixels get that color plus i.i.d. Gaussian noise.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::griddata::{Dataset, ImageGrid, Label, Point, PointAnnotationSet, PseudoMask, Sample, MAX_CLASSES};
use crate::scalar::Real;

/// Parameters of the scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Inclusive range of shape side lengths in pixels.
    pub shape_size: (usize, usize),
    pub noise_std: f64,
    /// Half-width of a per-image uniform color offset applied to every pixel.
    pub color_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_classes: 6,
            shapes_per_image: (2, 4),
            shape_size: (7, 16),
            noise_std: 0.05,
            color_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.shapes_per_image.0 > self.shapes_per_image.1 {
            return Err(Error::Config("empty shapes_per_image range".into()));
        }
        let (lo, hi) = self.shape_size;
        if lo == 0 || lo > hi {
            return Err(Error::Config("empty shape_size range".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be finite and >= 0".into()));
        }
        if !(self.color_jitter >= 0.0 && self.color_jitter.is_finite()) {
            return Err(Error::Config("color_jitter must be finite and >= 0".into()));
        }
        Ok(())
    }
}

const PALETTE: [[f64; 3]; 12] = [
    [0.50, 0.50, 0.50],
    [0.80, 0.25, 0.20],
    [0.25, 0.65, 0.30],
    [0.25, 0.35, 0.80],
    [0.80, 0.70, 0.25],
    [0.60, 0.30, 0.65],
    [0.20, 0.70, 0.70],
    [0.90, 0.55, 0.70],
    [0.40, 0.25, 0.10],
    [0.70, 0.85, 0.45],
    [0.10, 0.15, 0.35],
    [0.95, 0.95, 0.85],
];

/// Mean RGB color of a class. Classes beyond the base palette reuse it with
/// a deterministic shift so every class stays distinct.
pub fn class_color(class: Label) -> [f64; 3] {
    let base = PALETTE[class as usize % PALETTE.len()];
    let cycle = (class as usize / PALETTE.len()) as f64;
    base.map(|v| (v + 0.07 * cycle).rem_euclid(1.0))
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    class: Label,
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

impl Shape {
    fn covers(&self, row: usize, col: usize) -> bool {
        if row < self.top || col < self.left || row >= self.top + self.height || col >= self.left + self.width {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let ry = self.height as f64 / 2.0;
                let rx = self.width as f64 / 2.0;
                let dy = (row - self.top) as f64 + 0.5 - ry;
                let dx = (col - self.left) as f64 + 0.5 - rx;
                (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
            }
        }
    }
}

fn scene_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(2).wrapping_add(stream));
    rng
}

/// Renders scene `index` of the family described by `cfg`.
///
/// Returns the RGB image (values clamped to `[0, 1]`) and its dense mask.
pub fn generate_scene<T: Real>(cfg: &SceneConfig, index: u64) -> Result<(ImageGrid<T>, PseudoMask)> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index, 0);
    let n_shapes = rng.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let (min_side, max_side) = cfg.shape_size;
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let height = rng.random_range(min_side..=max_side).min(cfg.height);
            let width = rng.random_range(min_side..=max_side).min(cfg.width);
            Shape {
                kind: if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Ellipse },
                class: rng.random_range(1..cfg.num_classes) as Label,
                top: rng.random_range(0..=cfg.height - height),
                left: rng.random_range(0..=cfg.width - width),
                height,
                width,
            }
        })
        .collect();

    let mut mask = PseudoMask::filled(cfg.height, cfg.width, 0)?;
    for shape in &shapes {
        for r in shape.top..shape.top + shape.height {
            for c in shape.left..shape.left + shape.width {
                if shape.covers(r, c) {
                    mask.set(r, c, shape.class);
                }
            }
        }
    }

    let offset: [f64; 3] = if cfg.color_jitter > 0.0 {
        std::array::from_fn(|_| rng.random_range(-cfg.color_jitter..=cfg.color_jitter))
    } else {
        [0.0; 3]
    };
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(cfg.height * cfg.width * 3);
    for &label in mask.labels() {
        let color = class_color(label);
        for ch in 0..3 {
            let mut v = color[ch] + offset[ch];
            if cfg.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            values.push(T::lit(v.clamp(0.0, 1.0)));
        }
    }
    Ok((ImageGrid::new(cfg.height, cfg.width, 3, values)?, mask))
}

/// 4-connected components of a label map, each as a list of flat indices
/// in discovery order. Components are ordered by their first raster pixel.
pub fn connected_components(mask: &PseudoMask) -> Vec<(Label, Vec<usize>)> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] {
            continue;
        }
        let class = labels[start];
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && labels[j] == class {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        out.push((class, members));
    }
    out
}

/// Picks one uniformly random pixel from every connected component of `gt`.
pub fn sample_point_annotations(gt: &PseudoMask, image_id: usize, rng_seed: u64) -> Result<PointAnnotationSet> {
    if !gt.is_dense() {
        return Err(Error::Config("point sampling needs a dense ground-truth mask".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let w = gt.width();
    let points = connected_components(gt)
        .into_iter()
        .map(|(class, members)| {
            let i = members[rng.random_range(0..members.len())];
            Point {
                row: i / w,
                col: i % w,
                class,
            }
        })
        .collect();
    PointAnnotationSet::new(image_id, points)
}

/// Generates `count` scenes starting at scene index `first`, each with
/// point annotations and its dense ground truth.
pub fn generate_dataset<T: Real>(cfg: &SceneConfig, first: u64, count: usize) -> Result<Dataset<T>> {
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let index = first + k as u64;
        let (image, gt) = generate_scene::<T>(cfg, index)?;
        let point_seed = scene_rng(cfg.seed, index, 1).random::<u64>();
        let points = sample_point_annotations(&gt, k, point_seed)?;
        samples.push(Sample::new(image, points, Some(gt))?);
    }
    Dataset::new(samples, cfg.num_classes)
}

/// Mean number of annotated pixels per image.
pub fn annotation_stats<T: Real>(dataset: &Dataset<T>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no samples".into()));
    }
    let total: usize = dataset.samples().iter().map(|s| s.mask.labeled_count()).sum();
    Ok(total as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::griddata::{class_set, IGNORE};

    fn cfg() -> SceneConfig {
        SceneConfig {
            seed: 42,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let c = SceneConfig {
            shapes_per_image: (0, 0),
            ..cfg()
        };
        let (_, mask) = generate_scene::<f64>(&c, 3).unwrap();
        assert!(mask.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene::<f64>(&cfg(), 9).unwrap();
        let b = generate_scene::<f64>(&cfg(), 9).unwrap();
        assert_eq!(a, b);
        let other = generate_scene::<f64>(&cfg(), 10).unwrap();
        assert_ne!(a.1, other.1);
    }

    #[test]
    fn noise_free_rectangle_has_exact_color() {
        // search for a scene whose only shape is a class-3 rectangle
        let c = SceneConfig {
            shapes_per_image: (1, 1),
            noise_std: 0.0,
            ..cfg()
        };
        let mut found = false;
        for index in 0..500 {
            let (img, mask) = generate_scene::<f64>(&c, index).unwrap();
            let class3 = mask.labels().iter().filter(|&&l| l == 3).count();
            if class3 == 0 {
                continue;
            }
            // a rectangle fills its bounding box
            let rows: Vec<usize> = (0..32).filter(|&r| (0..32).any(|cc| mask.get(r, cc) == 3)).collect();
            let cols: Vec<usize> = (0..32).filter(|&cc| (0..32).any(|r| mask.get(r, cc) == 3)).collect();
            if rows.len() * cols.len() != class3 {
                continue;
            }
            found = true;
            let want = class_color(3);
            for &r in &rows {
                for &cc in &cols {
                    assert_eq!(img.pixel(r, cc), &want[..]);
                }
            }
            break;
        }
        assert!(found, "no class-3 rectangle scene in search range");
    }

    #[test]
    fn single_class_mask_gives_one_point() {
        let gt = PseudoMask::filled(8, 8, 2).unwrap();
        let pts = sample_point_annotations(&gt, 0, 1).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts.points()[0].class, 2);
    }

    #[test]
    fn two_disjoint_rectangles_give_two_points() {
        let mut gt = PseudoMask::filled(10, 10, 0).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                gt.set(r, c, 1);
                gt.set(r + 5, c + 5, 1);
            }
        }
        let pts = sample_point_annotations(&gt, 0, 7).unwrap();
        let ones = pts.points().iter().filter(|p| p.class == 1).count();
        assert_eq!(ones, 2);
        // background is one connected ring around both squares
        assert_eq!(pts.len(), 3);
    }

    #[test]
    fn rejects_sparse_ground_truth() {
        let gt = PseudoMask::new(1, 2, vec![0, IGNORE]).unwrap();
        assert!(sample_point_annotations(&gt, 0, 0).is_err());
    }

    #[test]
    fn sampled_points_agree_with_ground_truth() {
        for index in 0..20 {
            let (_, gt) = generate_scene::<f64>(&cfg(), index).unwrap();
            let pts = sample_point_annotations(&gt, 0, index).unwrap();
            assert_eq!(pts.len(), connected_components(&gt).len());
            for p in pts.points() {
                assert_eq!(gt.get(p.row, p.col), p.class);
            }
            assert_eq!(pts.class_set(), class_set(&gt));
        }
    }

    #[test]
    fn annotation_stats_means() {
        let make = |n: usize| {
            let gt = PseudoMask::filled(4, 4, 0).unwrap();
            let pts = PointAnnotationSet::new(
                0,
                (0..n).map(|i| Point { row: i / 4, col: i % 4, class: 0 }).collect(),
            )
            .unwrap();
            Sample::new(ImageGrid::<f64>::zeros(4, 4, 1).unwrap(), pts, Some(gt)).unwrap()
        };
        let one = Dataset::new(vec![make(5)], 2).unwrap();
        assert_eq!(annotation_stats(&one).unwrap(), 5.0);
        let three = Dataset::new(vec![make(2), make(4), make(6)], 2).unwrap();
        assert_eq!(annotation_stats(&three).unwrap(), 4.0);
        let empty = Dataset::<f64>::new(vec![], 2).unwrap();
        assert!(annotation_stats(&empty).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(SceneConfig { num_classes: 1, ..cfg() }.validate().is_err());
        assert!(SceneConfig { noise_std: -1.0, ..cfg() }.validate().is_err());
        assert!(SceneConfig { shapes_per_image: (3, 2), ..cfg() }.validate().is_err());
    }

    #[test]
    fn saved_datasets_are_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset::<f64>(&cfg(), 0, 3).unwrap().save(a.path()).unwrap();
        generate_dataset::<f64>(&cfg(), 0, 3).unwrap().save(b.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 1 + 3 * 3);
        for n in names {
            assert_eq!(
                std::fs::read(a.path().join(&n)).unwrap(),
                std::fs::read(b.path().join(&n)).unwrap()
            );
        }
        let loaded = Dataset::<f64>::load(a.path().join("manifest.txt")).unwrap();
        let again = Dataset::<f64>::load(a.path().join("manifest.txt")).unwrap();
        assert_eq!(loaded.num_classes(), 6);
        for (x, y) in loaded.samples().iter().zip(again.samples()) {
            assert_eq!(x.points, y.points);
            assert_eq!(x.image, y.image);
        }
    }
}
