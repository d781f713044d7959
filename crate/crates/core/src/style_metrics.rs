//! Ontological style measures of a line image.
//!
//! Four style attributes (pen pressure, slant, word spacing, character size)
//! and two non-style entropies, all computed over an Otsu foreground mask.

use serde::{Deserialize, Serialize};

use crate::corpus::LineImage;

/// Candidate slant angles in degrees, ascending.
pub const SLANT_ANGLES: [i32; 11] = [-45, -30, -20, -15, -5, 0, 5, 15, 20, 30, 45];

/// Quantile below which a column counts as a space.
pub const SPACE_QUANTILE: f64 = 0.3;

/// Smallest gap width, in pixels, that can separate words.
pub const MIN_WORD_GAP: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StyleError {
    #[error("{measure}: no ink in image")]
    NoInk { measure: &'static str },
    #[error("{measure}: selected region is empty")]
    EmptyRegion { measure: &'static str },
    #[error("{measure}: every column is a space column")]
    AllSpace { measure: &'static str },
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },
}

/// Binary ink mask, `true` = written text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl ForegroundMask {
    /// Panics when `bits.len() != width * height`.
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize, "mask size mismatch");
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Ink pixels per column.
    pub fn column_counts(&self) -> Vec<u32> {
        let w = self.width as usize;
        let mut counts = vec![0u32; w];
        for row in self.bits.chunks_exact(w) {
            for (c, &b) in counts.iter_mut().zip(row) {
                *c += u32::from(b);
            }
        }
        counts
    }

    fn check(&self, image: &LineImage) -> Result<(), StyleError> {
        if self.width != image.width() || self.height != image.height() {
            return Err(StyleError::DimensionMismatch {
                mask_w: self.width,
                mask_h: self.height,
                image_w: image.width(),
                image_h: image.height(),
            });
        }
        Ok(())
    }
}

pub fn histogram(values: impl IntoIterator<Item = u8>) -> [u64; 256] {
    let mut h = [0u64; 256];
    for v in values {
        h[v as usize] += 1;
    }
    h
}

/// Otsu's threshold: the smallest `t` maximising between-class variance of
/// the split `v <= t` / `v > t`. `None` when the image has a single level.
pub fn otsu_threshold(image: &LineImage) -> Option<u8> {
    let hist = histogram(image.pixels().iter().copied());
    let total: u64 = hist.iter().sum();
    let sum_all: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let mut best: Option<(u8, f64)> = None;
    let (mut w0, mut sum0) = (0u64, 0u64);
    for (t, &count) in hist.iter().enumerate().take(255) {
        w0 += count;
        sum0 += t as u64 * count;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 as f64 / w0 as f64;
        let m1 = (sum_all - sum0) as f64 / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu binarization; ink = intensities at or below the threshold. A
/// single-level image is all ink when that level is dark (< 128), else blank.
pub fn foreground_mask(image: &LineImage) -> ForegroundMask {
    let bits = match otsu_threshold(image) {
        Some(t) => image.pixels().iter().map(|&v| v <= t).collect(),
        None => {
            let dark = image.pixels()[0] < 128;
            vec![dark; image.pixels().len()]
        }
    };
    ForegroundMask::new(image.width(), image.height(), bits)
}

/// Mean intensity over the mask.
pub fn pen_pressure(image: &LineImage, mask: &ForegroundMask) -> Result<f64, StyleError> {
    mask.check(image)?;
    let (sum, n) = image
        .pixels()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &b)| b)
        .fold((0u64, 0u64), |(s, n), (&v, _)| (s + u64::from(v), n + 1));
    if n == 0 {
        return Err(StyleError::NoInk {
            measure: "pen_pressure",
        });
    }
    Ok(sum as f64 / n as f64)
}

/// Horizontal shift of row `y` for a shear of `degrees`, anchored at the
/// bottom row. Positive angles lean the top to the right.
pub fn shear_offset(y: u32, height: u32, degrees: f64) -> i64 {
    let lever = f64::from(height - 1 - y);
    (lever * degrees.to_radians().tan()).round() as i64
}

/// Deslanting criterion: shear the ink back by `degrees` and sum h² over
/// columns whose ink is one contiguous run of height h.
pub fn shear_score(mask: &ForegroundMask, degrees: f64) -> u64 {
    let (w, h) = (mask.width(), mask.height());
    let offsets: Vec<i64> = (0..h).map(|y| shear_offset(y, h, degrees)).collect();
    let min_off = offsets.iter().copied().min().unwrap_or(0);
    let max_off = offsets.iter().copied().max().unwrap_or(0);
    let cols = w as usize + (max_off - min_off) as usize;
    // per column: (count, top, bottom)
    let mut stats = vec![(0u32, u32::MAX, 0u32); cols];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let col = (i64::from(x) - offsets[y as usize] + max_off) as usize;
                let s = &mut stats[col];
                s.0 += 1;
                s.1 = s.1.min(y);
                s.2 = s.2.max(y);
            }
        }
    }
    stats
        .iter()
        .filter(|s| s.0 > 0)
        .map(|&(n, top, bottom)| {
            let extent = bottom - top + 1;
            if n == extent {
                u64::from(extent) * u64::from(extent)
            } else {
                0
            }
        })
        .sum()
}

/// Candidate angle maximising [`shear_score`]; ties go to the smallest
/// magnitude, then to the negative angle.
pub fn slant_angle(image: &LineImage, mask: &ForegroundMask) -> Result<i32, StyleError> {
    mask.check(image)?;
    if mask.is_empty() {
        return Err(StyleError::NoInk {
            measure: "slant_angle",
        });
    }
    let mut order = SLANT_ANGLES;
    order.sort_by_key(|&a| (a.abs(), a > 0));
    let mut best = (order[0], shear_score(mask, f64::from(order[0])));
    for &a in &order[1..] {
        let s = shear_score(mask, f64::from(a));
        if s > best.1 {
            best = (a, s);
        }
    }
    Ok(best.0)
}

/// Nearest-rank quantile of `values` (which must be nonempty).
pub fn nearest_rank(values: &[u32], q: f64) -> u32 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Column layout shared by word spacing and character size.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnProfile {
    /// Ink counts for columns between the first and last inked column.
    pub counts: Vec<u32>,
    pub is_space: Vec<bool>,
    pub cutoff: u32,
}

/// Space labelling of the ink extent. A column is a space when its count is
/// zero or below the nearest-rank 30% quantile of counts over the extent.
pub fn column_profile(mask: &ForegroundMask) -> Option<ColumnProfile> {
    let all = mask.column_counts();
    let first = all.iter().position(|&c| c > 0)?;
    let last = all.iter().rposition(|&c| c > 0)?;
    let counts = all[first..=last].to_vec();
    let cutoff = nearest_rank(&counts, SPACE_QUANTILE);
    let is_space = counts.iter().map(|&c| c == 0 || c < cutoff).collect();
    Some(ColumnProfile {
        counts,
        is_space,
        cutoff,
    })
}

impl ColumnProfile {
    fn character_size(&self) -> Option<f64> {
        let (sum, n) = self
            .counts
            .iter()
            .zip(&self.is_space)
            .filter(|(_, &s)| !s)
            .fold((0u64, 0u64), |(s, n), (&c, _)| (s + u64::from(c), n + 1));
        (n > 0).then(|| sum as f64 / n as f64)
    }

    /// Widths of space runs bounded by non-space columns on both sides.
    pub fn gaps(&self) -> Vec<usize> {
        let mut gaps = Vec::new();
        let mut seen_ink = false;
        let mut run = 0usize;
        for &space in &self.is_space {
            if space {
                run += 1;
            } else {
                if seen_ink && run > 0 {
                    gaps.push(run);
                }
                seen_ink = true;
                run = 0;
            }
        }
        gaps
    }
}

/// Mean ink per non-space column.
pub fn character_size(image: &LineImage, mask: &ForegroundMask) -> Result<f64, StyleError> {
    mask.check(image)?;
    let profile = column_profile(mask).ok_or(StyleError::NoInk {
        measure: "character_size",
    })?;
    profile.character_size().ok_or(StyleError::AllSpace {
        measure: "character_size",
    })
}

/// Mean width of inter-word gaps, 0 when there are none. A gap separates
/// words when it is at least `max(0.5 * character_size, 3)` wide.
pub fn word_spacing(image: &LineImage, mask: &ForegroundMask) -> Result<f64, StyleError> {
    mask.check(image)?;
    let profile = column_profile(mask).ok_or(StyleError::NoInk {
        measure: "word_spacing",
    })?;
    let size = profile.character_size().ok_or(StyleError::AllSpace {
        measure: "word_spacing",
    })?;
    let min_gap = (0.5 * size).max(MIN_WORD_GAP);
    let words: Vec<usize> = profile
        .gaps()
        .into_iter()
        .filter(|&g| g as f64 >= min_gap)
        .collect();
    if words.is_empty() {
        return Ok(0.0);
    }
    Ok(words.iter().sum::<usize>() as f64 / words.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Foreground,
    Background,
}

/// Shannon entropy in bits of the intensity histogram over a region.
pub fn region_entropy(
    image: &LineImage,
    mask: &ForegroundMask,
    region: Region,
) -> Result<f64, StyleError> {
    mask.check(image)?;
    let want = region == Region::Foreground;
    let hist = histogram(
        image
            .pixels()
            .iter()
            .zip(mask.bits())
            .filter(|(_, &b)| b == want)
            .map(|(&v, _)| v),
    );
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return Err(StyleError::EmptyRegion {
            measure: match region {
                Region::Foreground => "pen_entropy",
                Region::Background => "background_entropy",
            },
        });
    }
    Ok(entropy_bits(&hist, n))
}

fn entropy_bits(hist: &[u64], n: u64) -> f64 {
    let n = n as f64;
    let h: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Mean background intensity, used for pen/background difficulty.
pub fn background_mean(image: &LineImage, mask: &ForegroundMask) -> Result<f64, StyleError> {
    mask.check(image)?;
    let (sum, n) = image
        .pixels()
        .iter()
        .zip(mask.bits())
        .filter(|(_, &b)| !b)
        .fold((0u64, 0u64), |(s, n), (&v, _)| (s + u64::from(v), n + 1));
    if n == 0 {
        return Err(StyleError::EmptyRegion {
            measure: "background_mean",
        });
    }
    Ok(sum as f64 / n as f64)
}

/// The six measures of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    pub pen_pressure: f64,
    pub slant_angle: i32,
    pub word_spacing: f64,
    pub character_size: f64,
    pub background_entropy: f64,
    pub pen_entropy: f64,
}

/// The four style attributes used by the ontology.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StyleAttribute {
    PenPressure,
    SlantAngle,
    WordSpacing,
    CharacterSize,
}

impl StyleAttribute {
    pub const ALL: [StyleAttribute; 4] = [
        StyleAttribute::PenPressure,
        StyleAttribute::SlantAngle,
        StyleAttribute::WordSpacing,
        StyleAttribute::CharacterSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StyleAttribute::PenPressure => "pen_pressure",
            StyleAttribute::SlantAngle => "slant_angle",
            StyleAttribute::WordSpacing => "word_spacing",
            StyleAttribute::CharacterSize => "character_size",
        }
    }
}

impl StyleVector {
    pub fn get(&self, attr: StyleAttribute) -> f64 {
        match attr {
            StyleAttribute::PenPressure => self.pen_pressure,
            StyleAttribute::SlantAngle => f64::from(self.slant_angle),
            StyleAttribute::WordSpacing => self.word_spacing,
            StyleAttribute::CharacterSize => self.character_size,
        }
    }

    pub fn style4(&self) -> [f64; 4] {
        StyleAttribute::ALL.map(|a| self.get(a))
    }
}

/// All six measures. Errors name the failing measure.
pub fn style_vector(image: &LineImage) -> Result<StyleVector, StyleError> {
    let mask = foreground_mask(image);
    Ok(StyleVector {
        pen_pressure: pen_pressure(image, &mask)?,
        slant_angle: slant_angle(image, &mask)?,
        word_spacing: word_spacing(image, &mask)?,
        character_size: character_size(image, &mask)?,
        background_entropy: region_entropy(image, &mask, Region::Background)?,
        pen_entropy: region_entropy(image, &mask, Region::Foreground)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;

    /// Otsu oracle: minimise weighted within-class variance by brute force.
    fn otsu_oracle(pixels: &[u8]) -> Option<u8> {
        let mut best: Option<(u8, f64)> = None;
        for t in 0..=254u8 {
            let (lo, hi): (Vec<f64>, Vec<f64>) = (
                pixels.iter().filter(|&&v| v <= t).map(|&v| f64::from(v)).collect(),
                pixels.iter().filter(|&&v| v > t).map(|&v| f64::from(v)).collect(),
            );
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let var = |xs: &[f64]| {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            };
            let within = var(&lo) + var(&hi);
            if best.is_none_or(|(_, b)| within < b - 1e-9) {
                best = Some((t, within));
            }
        }
        best.map(|(t, _)| t)
    }

    #[test]
    fn uniform_images() {
        assert!(foreground_mask(&LineImage::filled(5, 4, 255)).is_empty());
        assert_eq!(foreground_mask(&LineImage::filled(5, 4, 0)).count(), 20);
    }

    #[test]
    fn bimodal_mask_selects_dark_pixels() {
        let img = LineImage::from_fn(12, 7, |x, y| if (x * 3 + y) % 4 == 0 { 30 } else { 220 });
        let mask = foreground_mask(&img);
        for (v, b) in img.pixels().iter().zip(mask.bits()) {
            assert_eq!(*b, *v == 30);
        }
        assert_eq!(otsu_threshold(&img), otsu_oracle(img.pixels()));
    }

    #[test]
    fn otsu_matches_within_class_oracle_on_random_images() {
        use rand::Rng;
        let mut rng = crate::seed::rng(5);
        for _ in 0..20 {
            let img = LineImage::from_fn(9, 6, |_, _| {
                if rng.random_bool(0.3) {
                    rng.random_range(0..90)
                } else {
                    rng.random_range(150..=255)
                }
            });
            let t = otsu_threshold(&img).unwrap();
            let o = otsu_oracle(img.pixels()).unwrap();
            // both optimise the same criterion; equal-optimum thresholds give the same split
            let split = |t: u8| img.pixels().iter().map(|&v| v <= t).collect::<Vec<_>>();
            assert_eq!(split(t), split(o));
        }
    }

    #[test]
    fn pen_pressure_examples() {
        let img = LineImage::new(2, 1, vec![100, 200]).unwrap();
        let mask = ForegroundMask::new(2, 1, vec![true, true]);
        assert_eq!(pen_pressure(&img, &mask).unwrap(), 150.0);
        let img = LineImage::filled(3, 3, 200);
        let mask = ForegroundMask::new(3, 3, vec![true; 9]);
        assert_eq!(pen_pressure(&img, &mask).unwrap(), 200.0);
        let img = LineImage::filled(3, 3, 0);
        assert_eq!(pen_pressure(&img, &foreground_mask(&img)).unwrap(), 0.0);
        let blank = LineImage::filled(3, 3, 255);
        assert_eq!(
            pen_pressure(&blank, &foreground_mask(&blank)),
            Err(StyleError::NoInk {
                measure: "pen_pressure"
            })
        );
    }

    #[test]
    fn vertical_bars_have_zero_slant() {
        let img = synth::stroke_image(0.0, 0);
        let mask = foreground_mask(&img);
        assert_eq!(slant_angle(&img, &mask).unwrap(), 0);
    }

    #[test]
    fn slant_recovers_every_candidate() {
        for &a in &SLANT_ANGLES {
            let img = synth::stroke_image(f64::from(a), 0);
            let mask = foreground_mask(&img);
            assert_eq!(slant_angle(&img, &mask).unwrap(), a, "angle {a}");
        }
    }

    fn blobs(widths: &[u32], gaps: &[u32], height: u32, pad: u32) -> LineImage {
        let total: u32 = widths.iter().sum::<u32>() + gaps.iter().sum::<u32>() + 2 * pad;
        let mut ink = vec![false; total as usize];
        let mut x = pad;
        for (i, &w) in widths.iter().enumerate() {
            for c in x..x + w {
                ink[c as usize] = true;
            }
            x += w + gaps.get(i).copied().unwrap_or(0);
        }
        LineImage::from_fn(total, height + 4, |x, y| {
            if ink[x as usize] && (2..2 + height).contains(&y) {
                0
            } else {
                255
            }
        })
    }

    fn spacing(img: &LineImage) -> f64 {
        word_spacing(img, &foreground_mask(img)).unwrap()
    }

    #[test]
    fn word_spacing_examples() {
        assert_eq!(spacing(&blobs(&[40], &[], 20, 5)), 0.0);
        assert_eq!(spacing(&blobs(&[20, 20], &[30], 20, 5)), 30.0);
        assert_eq!(spacing(&blobs(&[20, 20, 20], &[30, 40], 20, 5)), 35.0);
        // letter gaps below the cutoff are ignored
        assert_eq!(spacing(&blobs(&[20, 20, 20], &[2, 40], 20, 5)), 40.0);
    }

    #[test]
    fn character_size_examples() {
        let bar = LineImage::from_fn(30, 14, |_, y| if (2..12).contains(&y) { 0 } else { 255 });
        assert_eq!(character_size(&bar, &foreground_mask(&bar)).unwrap(), 10.0);

        let two = LineImage::from_fn(2, 10, |x, y| if y < 4 + 4 * x { 0 } else { 255 });
        assert_eq!(character_size(&two, &foreground_mask(&two)).unwrap(), 6.0);

        let banded = blobs(&[20, 20], &[30], 12, 0);
        assert_eq!(character_size(&banded, &foreground_mask(&banded)).unwrap(), 12.0);
    }

    #[test]
    fn entropy_boundaries() {
        let one = LineImage::filled(4, 4, 77);
        let all = ForegroundMask::new(4, 4, vec![true; 16]);
        assert_eq!(region_entropy(&one, &all, Region::Foreground).unwrap(), 0.0);

        let two = LineImage::from_fn(4, 4, |x, _| if x < 2 { 10 } else { 20 });
        assert_eq!(region_entropy(&two, &all, Region::Foreground).unwrap(), 1.0);

        let full = LineImage::from_fn(16, 16, |x, y| (y * 16 + x) as u8);
        let mask = ForegroundMask::new(16, 16, vec![true; 256]);
        assert_eq!(region_entropy(&full, &mask, Region::Foreground).unwrap(), 8.0);

        assert!(matches!(
            region_entropy(&one, &all, Region::Background),
            Err(StyleError::EmptyRegion { .. })
        ));
    }

    #[test]
    fn style_vector_errors_and_determinism() {
        let blank = LineImage::filled(20, 10, 255);
        assert_eq!(
            style_vector(&blank),
            Err(StyleError::NoInk {
                measure: "pen_pressure"
            })
        );
        let bars = synth::stroke_image(0.0, 0);
        let v = style_vector(&bars).unwrap();
        assert_eq!(v.pen_entropy, 0.0);
        assert_eq!(v.background_entropy, 0.0);
        assert_eq!(style_vector(&bars).unwrap(), v);
    }

    proptest! {
        #[test]
        fn pen_pressure_ignores_background(seed in any::<u64>(), bg in 200u8..=255) {
            use rand::Rng;
            let mut rng = crate::seed::rng(seed);
            let img = LineImage::from_fn(24, 10, |_, _| {
                if rng.random_bool(0.3) { rng.random_range(0..60) } else { 240 }
            });
            let mask = foreground_mask(&img);
            prop_assume!(!mask.is_empty());
            let p0 = pen_pressure(&img, &mask).unwrap();
            let mut changed = img.clone();
            for (v, &b) in changed.pixels_mut().iter_mut().zip(mask.bits()) {
                if !b { *v = bg; }
            }
            prop_assert_eq!(pen_pressure(&changed, &mask).unwrap(), p0);
        }

        #[test]
        fn entropy_bounded_and_uniform(levels in proptest::collection::btree_set(any::<u8>(), 1..40), reps in 1usize..4) {
            let values: Vec<u8> = levels.iter().flat_map(|&v| std::iter::repeat_n(v, reps)).collect();
            let img = LineImage::new(values.len() as u32, 1, values.clone()).unwrap();
            let mask = ForegroundMask::new(values.len() as u32, 1, vec![true; values.len()]);
            let h = region_entropy(&img, &mask, Region::Foreground).unwrap();
            prop_assert!(h <= 8.0);
            prop_assert!((h - (levels.len() as f64).log2()).abs() < 1e-12);
        }

        #[test]
        fn spacing_invariant_under_padding(
            widths in proptest::collection::vec(4u32..25, 1..5),
            gaps in proptest::collection::vec(1u32..40, 4),
            left in 0u32..30,
            right in 0u32..30,
        ) {
            let g = &gaps[..widths.len() - 1];
            let base = blobs(&widths, g, 15, 0);
            let padded = LineImage::from_fn(base.width() + left + right, base.height(), |x, y| {
                if x < left || x >= left + base.width() { 255 } else { base.get(x - left, y) }
            });
            let (m0, m1) = (foreground_mask(&base), foreground_mask(&padded));
            prop_assert_eq!(word_spacing(&base, &m0).unwrap(), word_spacing(&padded, &m1).unwrap());
            prop_assert_eq!(character_size(&base, &m0).unwrap(), character_size(&padded, &m1).unwrap());
        }
    }
}
