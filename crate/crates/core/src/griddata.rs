//! Raster and label containers plus their on-disk formats.
//!
//! Images are binary PGM (`P5`, one channel) or PPM (`P6`, three channels)
//! with 8-bit samples. Masks are `P5` files whose byte values are class ids,
//! with [`IGNORE`] marking unlabeled pixels. Point annotations are plain text,
//! one `row col class` triple per line.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Real};

/// Class id of a pixel. Values `>= num_classes` are invalid except [`IGNORE`].
pub type Label = u8;

/// Reserved label for pixels that carry no supervision.
pub const IGNORE: Label = 255;

/// Largest class count representable next to the [`IGNORE`] sentinel.
pub const MAX_CLASSES: usize = IGNORE as usize;

/// Row-major `height x width x channels` raster.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid<T> {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Real> ImageGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x{channels}, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if !all_finite(&values) {
            return Err(Error::NonFinite("image values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![T::zero(); height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> T {
        self.values[(row * self.width + col) * self.channels + channel]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(height * width * self.channels);
        for r in top..top + height {
            let start = (r * self.width + left) * self.channels;
            values.extend_from_slice(&self.values[start..start + width * self.channels]);
        }
        Self::new(height, width, self.channels, values)
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Real>(&self) -> ImageGrid<U> {
        ImageGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Dense label raster; unlabeled pixels hold [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PseudoMask {
    height: usize,
    width: usize,
    labels: Vec<Label>,
}

impl PseudoMask {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} labels for {height}x{width}, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// All-[`IGNORE`] mask.
    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![IGNORE; height * width])
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: Label) {
        self.labels[row * self.width + col] = label;
    }

    pub fn same_dims(&self, other: &PseudoMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    pub fn is_dense(&self) -> bool {
        self.labels.iter().all(|&l| l != IGNORE)
    }

    /// Checks that every labeled pixel is a valid class id.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE && l as usize >= num_classes)
        {
            Some(&bad) => Err(Error::InvalidClass {
                class: bad as usize,
                num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Extracts the labeled pixels in raster order.
    pub fn to_points(&self, image_id: usize) -> PointAnnotationSet {
        let points = self
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE)
            .map(|(i, &class)| Point {
                row: i / self.width,
                col: i % self.width,
                class,
            })
            .collect();
        PointAnnotationSet { image_id, points }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut labels = Vec::with_capacity(height * width);
        for r in top..top + height {
            let start = r * self.width + left;
            labels.extend_from_slice(&self.labels[start..start + width]);
        }
        Self::new(height, width, labels)
    }
}

/// One annotated pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point {
    pub row: usize,
    pub col: usize,
    pub class: Label,
}

/// Annotated pixels of one image, in annotation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointAnnotationSet {
    pub image_id: usize,
    points: Vec<Point>,
}

impl PointAnnotationSet {
    /// Rejects duplicate coordinates.
    pub fn new(image_id: usize, points: Vec<Point>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert((p.row, p.col)) {
                return Err(Error::DuplicatePoint {
                    row: p.row,
                    col: p.col,
                });
            }
        }
        Ok(Self { image_id, points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        for p in &self.points {
            if p.row >= height || p.col >= width {
                return Err(Error::OutOfBounds {
                    row: p.row,
                    col: p.col,
                    height,
                    width,
                });
            }
        }
        Ok(())
    }

    /// Points that fall inside the crop window, re-expressed in crop coordinates.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        let points = self
            .points
            .iter()
            .filter(|p| {
                p.row >= top && p.row < top + height && p.col >= left && p.col < left + width
            })
            .map(|p| Point {
                row: p.row - top,
                col: p.col - left,
                class: p.class,
            })
            .collect();
        Self {
            image_id: self.image_id,
            points,
        }
    }

    pub fn class_set(&self) -> ClassSet {
        ClassSet(self.points.iter().map(|p| p.class).collect())
    }
}

/// Materializes the sparse mask for a point set.
pub fn points_to_pseudo_mask(
    points: &PointAnnotationSet,
    height: usize,
    width: usize,
) -> Result<PseudoMask> {
    points.check_bounds(height, width)?;
    let mut mask = PseudoMask::empty(height, width)?;
    for p in points.points() {
        if p.class == IGNORE {
            return Err(Error::InvalidClass {
                class: IGNORE as usize,
                num_classes: MAX_CLASSES,
            });
        }
        if mask.get(p.row, p.col) != IGNORE {
            return Err(Error::DuplicatePoint {
                row: p.row,
                col: p.col,
            });
        }
        mask.set(p.row, p.col, p.class);
    }
    Ok(mask)
}

/// Distinct classes present in one image's annotations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassSet(pub BTreeSet<Label>);

impl ClassSet {
    pub fn contains(&self, class: Label) -> bool {
        self.0.contains(&class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Label> + '_ {
        self.0.iter().copied()
    }
}

pub fn class_set(mask: &PseudoMask) -> ClassSet {
    ClassSet(
        mask.labels()
            .iter()
            .copied()
            .filter(|&l| l != IGNORE)
            .collect(),
    )
}

/// One training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub image: ImageGrid<T>,
    pub points: PointAnnotationSet,
    pub mask: PseudoMask,
    pub ground_truth: Option<PseudoMask>,
}

impl<T: Real> Sample<T> {
    pub fn new(
        image: ImageGrid<T>,
        points: PointAnnotationSet,
        ground_truth: Option<PseudoMask>,
    ) -> Result<Self> {
        let mask = points_to_pseudo_mask(&points, image.height(), image.width())?;
        if let Some(gt) = &ground_truth {
            if !gt.same_dims(&mask) {
                return Err(Error::Shape(format!(
                    "ground truth {}x{} does not match image {}x{}",
                    gt.height(),
                    gt.width(),
                    mask.height(),
                    mask.width()
                )));
            }
        }
        Ok(Self {
            image,
            points,
            mask,
            ground_truth,
        })
    }
}

/// Ordered collection of samples sharing one label space.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
    num_classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>, num_classes: usize) -> Result<Self> {
        if !(1..=MAX_CLASSES).contains(&num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
            )));
        }
        for s in &samples {
            s.mask.validate(num_classes)?;
            if let Some(gt) = &s.ground_truth {
                gt.validate(num_classes)?;
            }
        }
        Ok(Self {
            samples,
            num_classes,
        })
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Reads a manifest of `image annotation [ground_truth]` lines.
    ///
    /// Relative paths resolve against the manifest's directory. An optional
    /// `num_classes N` line fixes the label space; otherwise it is inferred
    /// from the largest class id seen.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let mut declared = None;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = strip_comment(line);
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                ["num_classes", n] => {
                    declared = Some(n.parse::<usize>().map_err(|_| {
                        Error::format(manifest, format!("line {}: bad class count", lineno + 1))
                    })?);
                }
                [img, ann] | [img, ann, _] => {
                    let image = load_image(base.join(img))?;
                    let points = load_points(base.join(ann), samples.len())?;
                    let gt = match fields.get(2) {
                        Some(p) => Some(load_mask(base.join(p))?),
                        None => None,
                    };
                    samples.push(Sample::new(image, points, gt)?);
                }
                _ => {
                    return Err(Error::format(
                        manifest,
                        format!("line {}: expected 2 or 3 paths", lineno + 1),
                    ))
                }
            }
        }
        let num_classes = match declared {
            Some(n) => n,
            None => {
                let max_label = samples
                    .iter()
                    .flat_map(|s| {
                        s.mask
                            .labels()
                            .iter()
                            .chain(s.ground_truth.iter().flat_map(|g| g.labels().iter()))
                    })
                    .copied()
                    .filter(|&l| l != IGNORE)
                    .max();
                max_label.map_or(1, |m| m as usize + 1)
            }
        };
        Self::new(samples, num_classes)
    }

    /// Writes every sample plus a manifest into `dir`.
    ///
    /// File names are `NNNNN.{ppm|pgm}`, `NNNNN.points` and `NNNNN_gt.pgm`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("num_classes {}\n", self.num_classes);
        for (i, s) in self.samples.iter().enumerate() {
            let ext = if s.image.channels() == 1 { "pgm" } else { "ppm" };
            let img = format!("{i:05}.{ext}");
            let ann = format!("{i:05}.points");
            save_image(&s.image, dir.join(&img))?;
            save_points(&s.points, dir.join(&ann))?;
            manifest.push_str(&img);
            manifest.push(' ');
            manifest.push_str(&ann);
            if let Some(gt) = &s.ground_truth {
                let gt_name = format!("{i:05}_gt.pgm");
                save_mask(gt, dir.join(&gt_name))?;
                manifest.push(' ');
                manifest.push_str(&gt_name);
            }
            manifest.push('\n');
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

struct RawPnm {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data: Vec<u8>,
}

fn read_pnm(path: &Path) -> Result<RawPnm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(Error::format(path, "expected P5 or P6 magic"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut header = [0usize; 3];
    for slot in header.iter_mut() {
        // whitespace and `#` comments may separate header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "header field out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(path, "missing separator after header")),
    }
    let [width, height, maxval] = header;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(path, format!("unsupported max value {maxval}")));
    }
    let channels = if magic[1] == b'5' { 1 } else { 3 };
    let expected = width * height * channels;
    let data = bytes[pos..].to_vec();
    if data.len() != expected {
        return Err(Error::format(
            path,
            format!("dimension mismatch: header implies {expected} bytes, found {}", data.len()),
        ));
    }
    Ok(RawPnm {
        magic,
        width,
        height,
        maxval,
        data,
    })
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "{magic}\n{width} {height}\n255\n")
        .and_then(|_| file.write_all(data))
        .map_err(|e| Error::io(path, e))
}

/// Reads a PGM/PPM image, scaling samples into `[0, 1]`.
pub fn load_image<T: Real>(path: impl AsRef<Path>) -> Result<ImageGrid<T>> {
    let path = path.as_ref();
    let raw = read_pnm(path)?;
    let channels = if raw.magic[1] == b'5' { 1 } else { 3 };
    let scale = T::from_count(raw.maxval);
    let values = raw
        .data
        .iter()
        .map(|&b| T::from_count(b as usize) / scale)
        .collect();
    ImageGrid::new(raw.height, raw.width, channels, values)
}

/// Writes a one-channel image as PGM or a three-channel image as PPM.
///
/// Values are clamped to `[0, 1]` and rounded to the nearest 8-bit level.
pub fn save_image<T: Real>(image: &ImageGrid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Shape(format!("cannot save {c}-channel image"))),
    };
    let data: Vec<u8> = image
        .values()
        .iter()
        .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_pnm(path, magic, image.width(), image.height(), &data)
}

/// Reads a label mask stored as raw PGM bytes.
pub fn load_mask(path: impl AsRef<Path>) -> Result<PseudoMask> {
    let path = path.as_ref();
    let raw = read_pnm(path)?;
    if raw.magic[1] != b'5' {
        return Err(Error::format(path, "masks must be single-channel P5"));
    }
    PseudoMask::new(raw.height, raw.width, raw.data)
}

pub fn save_mask(mask: &PseudoMask, path: impl AsRef<Path>) -> Result<()> {
    write_pnm(path.as_ref(), "P5", mask.width(), mask.height(), mask.labels())
}

/// Parses `row col class` lines; `#` starts a comment.
pub fn load_points(path: impl AsRef<Path>, image_id: usize) -> Result<PointAnnotationSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<&str> = strip_comment(line).split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parsed = match fields.as_slice() {
            [r, c, k] => r
                .parse()
                .ok()
                .zip(c.parse().ok())
                .zip(k.parse::<Label>().ok().filter(|&k| k != IGNORE)),
            _ => None,
        };
        let ((row, col), class) = parsed.ok_or_else(|| {
            Error::format(path, format!("line {}: expected `row col class`", lineno + 1))
        })?;
        points.push(Point { row, col, class });
    }
    PointAnnotationSet::new(image_id, points)
}

pub fn save_points(points: &PointAnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("# row col class\n");
    for p in points.points() {
        text.push_str(&format!("{} {} {}\n", p.row, p.col, p.class));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_bytes(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn pgm_max_pixel_normalizes_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bytes(dir.path(), "a.pgm", b"P5\n2 2\n255\n\x00\xff\x10\x20");
        let img: ImageGrid<f64> = load_image(&p).unwrap();
        assert_eq!(img.get(0, 1, 0), 1.0);
        assert_eq!(img.get(0, 0, 0), 0.0);
    }

    #[test]
    fn single_zero_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bytes(dir.path(), "z.pgm", b"P5 1 1 255\n\x00");
        let img: ImageGrid<f64> = load_image(&p).unwrap();
        assert_eq!(img, ImageGrid::new(1, 1, 1, vec![0.0]).unwrap());
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bytes(dir.path(), "c.pgm", b"P5\n# made by hand\n1 1\n255\n\x80");
        let img: ImageGrid<f32> = load_image(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 128.0 / 255.0);
    }

    #[test]
    fn ppm_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bytes = b"P6\n4 4\n255\n".to_vec();
        bytes.extend((0..48).map(|_| rng.random::<u8>()));
        let src = write_bytes(dir.path(), "src.ppm", &bytes);
        let img: ImageGrid<f64> = load_image(&src).unwrap();
        assert_eq!(img.channels(), 3);
        let dst = dir.path().join("dst.ppm");
        save_image(&img, &dst).unwrap();
        assert_eq!(fs::read(&dst).unwrap(), bytes);
        let img32: ImageGrid<f32> = load_image(&src).unwrap();
        save_image(&img32, &dst).unwrap();
        assert_eq!(fs::read(&dst).unwrap(), bytes);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_image::<f64>(dir.path().join("nope.pgm"));
        assert!(matches!(missing, Err(Error::Io { .. })));
        let bad_magic = write_bytes(dir.path(), "m.pgm", b"P2\n1 1\n255\n0");
        assert!(matches!(load_image::<f64>(&bad_magic), Err(Error::Format { .. })));
        let short = write_bytes(dir.path(), "s.pgm", b"P5\n2 2\n255\n\x00\x00\x00");
        assert!(matches!(load_image::<f64>(&short), Err(Error::Format { .. })));
        let wide = write_bytes(dir.path(), "w.pgm", b"P5\n1 1\n65535\n\x00\x00");
        assert!(matches!(load_image::<f64>(&wide), Err(Error::Format { .. })));
    }

    #[test]
    fn image_rejects_non_finite_and_bad_shape() {
        assert!(ImageGrid::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ImageGrid::<f64>::new(0, 1, 1, vec![]).is_err());
        assert!(ImageGrid::new(2, 2, 1, vec![0.0f64; 3]).is_err());
    }

    #[test]
    fn empty_points_give_all_ignore() {
        let set = PointAnnotationSet::new(0, vec![]).unwrap();
        let mask = points_to_pseudo_mask(&set, 3, 3).unwrap();
        assert_eq!(mask.labeled_count(), 0);
        assert!(mask.labels().iter().all(|&l| l == IGNORE));
    }

    #[test]
    fn single_point_mask() {
        let set = PointAnnotationSet::new(0, vec![Point { row: 0, col: 0, class: 2 }]).unwrap();
        let mask = points_to_pseudo_mask(&set, 2, 2).unwrap();
        assert_eq!(mask.labels(), &[2, IGNORE, IGNORE, IGNORE]);
    }

    #[test]
    fn random_points_count_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut coords = HashSet::new();
        while coords.len() < 12 {
            coords.insert((rng.random_range(0..32), rng.random_range(0..32)));
        }
        let pts = coords
            .into_iter()
            .map(|(row, col)| Point { row, col, class: rng.random_range(0..6) })
            .collect();
        let set = PointAnnotationSet::new(0, pts).unwrap();
        let mask = points_to_pseudo_mask(&set, 32, 32).unwrap();
        let counted = (0..32)
            .flat_map(|r| (0..32).map(move |c| (r, c)))
            .filter(|&(r, c)| mask.get(r, c) != IGNORE)
            .count();
        assert_eq!(counted, 12);
    }

    #[test]
    fn points_errors() {
        let dup = PointAnnotationSet::new(
            0,
            vec![Point { row: 1, col: 1, class: 0 }, Point { row: 1, col: 1, class: 1 }],
        );
        assert!(matches!(dup, Err(Error::DuplicatePoint { row: 1, col: 1 })));
        let oob = PointAnnotationSet::new(0, vec![Point { row: 3, col: 0, class: 0 }]).unwrap();
        assert!(matches!(
            points_to_pseudo_mask(&oob, 3, 3),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn class_set_cases() {
        assert!(class_set(&PseudoMask::empty(4, 4).unwrap()).is_empty());
        let mask = PseudoMask::new(2, 2, vec![1, 1, IGNORE, 4]).unwrap();
        assert_eq!(class_set(&mask).iter().collect::<Vec<_>>(), vec![1, 4]);
    }

    #[test]
    fn class_set_matches_full_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<Label> = (0..256)
            .map(|_| if rng.random_bool(0.7) { IGNORE } else { rng.random_range(0..9) })
            .collect();
        let mask = PseudoMask::new(16, 16, labels).unwrap();
        let mut scan = BTreeSet::new();
        for r in 0..16 {
            for c in 0..16 {
                let l = mask.get(r, c);
                if l != IGNORE {
                    scan.insert(l);
                }
            }
        }
        assert_eq!(class_set(&mask).0, scan);
    }

    #[test]
    fn points_file_round_trip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_bytes(dir.path(), "a.points", b"# header\n3 4 1\n\n0 0 2 # trailing\n");
        let set = load_points(&p, 7).unwrap();
        assert_eq!(set.image_id, 7);
        assert_eq!(
            set.points(),
            &[Point { row: 3, col: 4, class: 1 }, Point { row: 0, col: 0, class: 2 }]
        );
        let q = dir.path().join("b.points");
        save_points(&set, &q).unwrap();
        assert_eq!(load_points(&q, 7).unwrap(), set);
        let bad = write_bytes(dir.path(), "bad.points", b"1 2\n");
        assert!(load_points(&bad, 0).is_err());
    }

    #[test]
    fn crop_keeps_points_inside_window() {
        let set = PointAnnotationSet::new(
            0,
            vec![Point { row: 1, col: 1, class: 0 }, Point { row: 5, col: 5, class: 1 }],
        )
        .unwrap();
        let c = set.crop(1, 1, 3, 3);
        assert_eq!(c.points(), &[Point { row: 0, col: 0, class: 0 }]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn point_sets() -> impl Strategy<Value = (usize, usize, Vec<Point>)> {
            (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
                let pts = proptest::collection::btree_map((0..h, 0..w), 0u8..10, 0..20).prop_map(
                    |m| {
                        m.into_iter()
                            .map(|((row, col), class)| Point { row, col, class })
                            .collect::<Vec<_>>()
                    },
                );
                (Just(h), Just(w), pts)
            })
        }

        proptest! {
            #[test]
            fn mask_to_points_recovers_set((h, w, pts) in point_sets()) {
                let set = PointAnnotationSet::new(0, pts.clone()).unwrap();
                let mask = points_to_pseudo_mask(&set, h, w).unwrap();
                prop_assert_eq!(mask.labeled_count(), pts.len());
                let back: BTreeSet<Point> = mask.to_points(0).points().iter().copied().collect();
                let orig: BTreeSet<Point> = pts.into_iter().collect();
                prop_assert_eq!(back, orig);
                prop_assert_eq!(class_set(&mask), set.class_set());
            }
        }
    }
}
