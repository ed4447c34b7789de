//! Synthetic segmentation data: generation, the `PAALDS1` file format and
//! five-fold splitting.
//!
//! Each image is a noisy dark background with at most one filled ellipse per
//! foreground class. Class frequencies are controlled per class, which is
//! how the minority-class imbalance is produced.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"PAALDS1\0";
pub const HEADER_LEN: usize = 20;
pub const NUM_FOLDS: usize = 5;

const BACKGROUND_LEVEL: f64 = 40.0;
const PIXEL_NOISE_SIGMA: f64 = 10.0;
const INTENSITY_JITTER: f64 = 15.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: u32,
    pub image: Vec<u8>,
    /// Labels in `0..=n_fg`, 0 is background.
    pub mask: Vec<u8>,
}

impl Sample {
    pub fn contains(&self, class: u8) -> bool {
        self.mask.contains(&class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Sample by id. Generated datasets store sample `i` at index `i`.
    pub fn get(&self, id: u32) -> Option<&Sample> {
        match self.samples.get(id as usize) {
            Some(s) if s.id == id => Some(s),
            _ => self.samples.iter().find(|s| s.id == id),
        }
    }

    /// Fraction of samples whose mask contains each class `1..=n_fg`.
    pub fn occurrence(&self, n_fg: usize) -> Vec<f64> {
        let n = self.samples.len().max(1) as f64;
        (1..=n_fg as u8)
            .map(|c| self.samples.iter().filter(|s| s.contains(c)).count() as f64 / n)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    /// Probability that an image contains this class, in `(0, 1]`.
    pub occurrence: f64,
    /// Ellipse semi-axis range in pixels.
    pub axis_min: f64,
    pub axis_max: f64,
    /// Mean grey level of the class region.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProfile {
    pub classes: Vec<ClassSpec>,
}

impl Default for ClassProfile {
    fn default() -> Self {
        ClassProfile {
            classes: vec![
                ClassSpec {
                    occurrence: 0.9,
                    axis_min: 5.0,
                    axis_max: 10.0,
                    intensity: 120.0,
                },
                ClassSpec {
                    occurrence: 0.6,
                    axis_min: 3.0,
                    axis_max: 7.0,
                    intensity: 180.0,
                },
                ClassSpec {
                    occurrence: 0.15,
                    axis_min: 2.0,
                    axis_max: 4.0,
                    intensity: 220.0,
                },
            ],
        }
    }
}

impl ClassProfile {
    pub fn n_fg(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > 254 {
            return Err(Error::invalid("profile needs 1..=254 foreground classes"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.occurrence > 0.0 && c.occurrence <= 1.0) {
                return Err(Error::invalid(format!(
                    "class {} occurrence {} outside (0, 1]",
                    i + 1,
                    c.occurrence
                )));
            }
            if !(c.axis_min > 0.0 && c.axis_min <= c.axis_max) {
                return Err(Error::invalid(format!("class {} has an empty axis range", i + 1)));
            }
        }
        Ok(())
    }
}

/// Generates `n` samples of `h x w`, fully determined by `seed`.
pub fn generate(seed: u64, n: usize, h: usize, w: usize, profile: &ClassProfile) -> Result<Dataset> {
    profile.validate()?;
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!("image size {h}x{w} too small")));
    }
    let mut rng = crate::rng(seed);
    let noise = Normal::new(0.0, PIXEL_NOISE_SIGMA).expect("positive sigma");
    let samples = (0..n)
        .map(|i| generate_one(i as u32, h, w, profile, &mut rng, &noise))
        .collect();
    Ok(Dataset { h, w, samples })
}

fn generate_one(
    id: u32,
    h: usize,
    w: usize,
    profile: &ClassProfile,
    rng: &mut crate::Rng,
    noise: &Normal<f64>,
) -> Sample {
    let mut level: Vec<f64> = (0..h * w).map(|_| BACKGROUND_LEVEL + noise.sample(rng)).collect();
    let mut mask = vec![0u8; h * w];
    let mut placed: Vec<u8> = Vec::new();

    for (ci, spec) in profile.classes.iter().enumerate() {
        let label = ci as u8 + 1;
        if rng.gen::<f64>() >= spec.occurrence {
            continue;
        }
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let region = draw_ellipse(h, w, spec, rng);
            if region.is_empty() {
                continue;
            }
            let mut trial = mask.clone();
            for &p in &region {
                trial[p] = label;
            }
            // earlier classes must survive as one piece
            if placed.iter().any(|&c| component_count(&trial, h, w, c) != 1) {
                continue;
            }
            let base = spec.intensity + rng.gen_range(-INTENSITY_JITTER..=INTENSITY_JITTER);
            for &p in &region {
                level[p] = base + noise.sample(rng);
            }
            mask = trial;
            placed.push(label);
            break;
        }
    }
    let image = level.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Sample { id, image, mask }
}

/// Pixel indices of an axis-aligned ellipse that fits inside the image.
fn draw_ellipse(h: usize, w: usize, spec: &ClassSpec, rng: &mut crate::Rng) -> Vec<usize> {
    let max_ax = (w as f64 - 1.0) / 2.0;
    let max_ay = (h as f64 - 1.0) / 2.0;
    let ax = rng.gen_range(spec.axis_min..=spec.axis_max).min(max_ax);
    let ay = rng.gen_range(spec.axis_min..=spec.axis_max).min(max_ay);
    let cx = rng.gen_range(ax..=(w as f64 - 1.0 - ax));
    let cy = rng.gen_range(ay..=(h as f64 - 1.0 - ay));
    let mut region = Vec::new();
    for y in 0..h {
        let dy = (y as f64 - cy) / ay;
        for x in 0..w {
            let dx = (x as f64 - cx) / ax;
            if dx * dx + dy * dy <= 1.0 {
                region.push(y * w + x);
            }
        }
    }
    region
}

/// Number of 8-connected components of `label` in a row-major mask.
pub fn component_count(mask: &[u8], h: usize, w: usize, label: u8) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] != label || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] == label && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
    }
    count
}

/// Serialises in the `PAALDS1` layout: magic, `u32` n, h, w (little
/// endian), then per sample `h*w` image bytes followed by `h*w` mask bytes.
pub fn write_to(out: &mut impl Write, ds: &Dataset) -> Result<()> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("extent overflow: {what} = {v}")))
    };
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&to_u32(ds.samples.len(), "n")?.to_le_bytes())?;
    out.write_all(&to_u32(ds.h, "h")?.to_le_bytes())?;
    out.write_all(&to_u32(ds.w, "w")?.to_le_bytes())?;
    let hw = ds.pixels();
    for s in &ds.samples {
        if s.image.len() != hw || s.mask.len() != hw {
            return Err(Error::Format(format!("sample {} is not {}x{}", s.id, ds.h, ds.w)));
        }
        out.write_all(&s.image)?;
        out.write_all(&s.mask)?;
    }
    Ok(())
}

pub fn read_from(input: &mut impl Read) -> Result<Dataset> {
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Format("truncated file: incomplete header".into()))?;
    if &header[..8] != DATASET_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let field = |i: usize| u32::from_le_bytes(header[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (n, h, w) = (field(0), field(1), field(2));
    let hw = h
        .checked_mul(w)
        .filter(|hw| hw.checked_mul(2).and_then(|r| r.checked_mul(n)).is_some())
        .ok_or_else(|| Error::Format(format!("extent overflow: {n} x {h} x {w}")))?;
    if n > 0 && hw == 0 {
        return Err(Error::Format("extent overflow: zero-sized images".into()));
    }
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for id in 0..n {
        let mut image = vec![0u8; hw];
        let mut mask = vec![0u8; hw];
        input
            .read_exact(&mut image)
            .and_then(|_| input.read_exact(&mut mask))
            .map_err(|_| Error::Format(format!("truncated file: record {id} of {n}")))?;
        samples.push(Sample {
            id: id as u32,
            image,
            mask,
        });
    }
    Ok(Dataset { h, w, samples })
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_to(&mut out, ds)?;
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_from(&mut BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

/// Seeded 8:2 five-fold split of ids `0..n`. Id lists are sorted.
pub fn split_folds(n: usize, seed: u64) -> Result<FoldSplit> {
    if n < NUM_FOLDS {
        return Err(Error::invalid(format!("need at least {NUM_FOLDS} samples to split, got {n}")));
    }
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(&mut crate::rng(seed));
    let mut chunks = Vec::with_capacity(NUM_FOLDS);
    let mut start = 0;
    for k in 0..NUM_FOLDS {
        let len = n / NUM_FOLDS + usize::from(k < n % NUM_FOLDS);
        chunks.push(&perm[start..start + len]);
        start += len;
    }
    let folds = (0..NUM_FOLDS)
        .map(|k| {
            let mut val = chunks[k].to_vec();
            val.sort_unstable();
            let mut train: Vec<u32> = chunks
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .flat_map(|(_, c)| c.iter().copied())
                .collect();
            train.sort_unstable();
            Fold { train, val }
        })
        .collect();
    Ok(FoldSplit { folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate(7, 40, 32, 32, &ClassProfile::default()).unwrap()
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_to(&mut ba, &a).unwrap();
        write_to(&mut bb, &b).unwrap();
        assert_eq!(ba, bb);
        assert_ne!(a, generate(8, 40, 32, 32, &ClassProfile::default()).unwrap());
    }

    #[test]
    fn certain_class_always_present() {
        let mut profile = ClassProfile::default();
        profile.classes[0].occurrence = 1.0;
        let ds = generate(3, 200, 32, 32, &profile).unwrap();
        assert!(ds.samples.iter().all(|s| s.contains(1)));
    }

    #[test]
    fn each_class_is_one_component() {
        for s in &small().samples {
            for c in 1..=3 {
                assert!(component_count(&s.mask, 32, 32, c) <= 1, "sample {} class {c}", s.id);
            }
            assert!(s.mask.iter().all(|&l| l <= 3));
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let ds = small();
        let mut buf = Vec::new();
        write_to(&mut buf, &ds).unwrap();
        assert_eq!(buf.len(), HEADER_LEN + 40 * 2 * 32 * 32);
        assert_eq!(read_from(&mut buf.as_slice()).unwrap(), ds);

        let mut bad = buf.clone();
        bad[0] = b'Q';
        assert!(read_from(&mut bad.as_slice()).unwrap_err().to_string().contains("bad magic"));

        let cut = &buf[..buf.len() - 1];
        assert!(read_from(&mut &cut[..]).unwrap_err().to_string().contains("truncated"));

        let mut huge = buf[..HEADER_LEN].to_vec();
        huge[8..20].copy_from_slice(&[0xff; 12]);
        assert!(read_from(&mut huge.as_slice()).is_err());
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = generate(1, 0, 32, 32, &ClassProfile::default()).unwrap();
        let mut buf = Vec::new();
        write_to(&mut buf, &ds).unwrap();
        assert_eq!(buf.len(), 20);
        assert_eq!(read_from(&mut buf.as_slice()).unwrap(), ds);
    }

    #[test]
    fn folds_partition_ids() {
        let split = split_folds(10, 3).unwrap();
        assert_eq!(split.folds.len(), 5);
        let mut all: Vec<u32> = Vec::new();
        for f in &split.folds {
            assert_eq!(f.val.len(), 2);
            assert_eq!(f.train.len(), 8);
            assert!(f.val.iter().all(|v| !f.train.contains(v)));
            all.extend(&f.val);
        }
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split, split_folds(10, 3).unwrap());
        assert!(split_folds(4, 0).is_err());
    }

    #[test]
    fn uneven_folds_differ_by_at_most_one() {
        let split = split_folds(13, 1).unwrap();
        let sizes: Vec<usize> = split.folds.iter().map(|f| f.val.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 13);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn rejects_bad_profile() {
        let mut p = ClassProfile::default();
        p.classes[1].occurrence = 0.0;
        assert!(generate(0, 1, 32, 32, &p).is_err());
    }
}
