//! Synthetic data generators: stroke images, handwriting-like lines,
//! demo corpora and Gaussian point clouds.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{
    Appearance, CorpusError, LineImage, Manifest, ManifestRecord, SampleLabels,
};
use crate::seed;
use crate::style_metrics::shear_offset;

pub const STROKE_HEIGHT: u32 = 64;

/// Shears an image row-wise by `degrees` (top leans right for positive
/// angles), nearest neighbour, same width, vacated pixels set to `fill`.
pub fn shear_rows(image: &LineImage, degrees: f64, fill: u8) -> LineImage {
    let (w, h) = (image.width(), image.height());
    let mut out = LineImage::filled(w, h, fill);
    for y in 0..h {
        let off = shear_offset(y, h, degrees);
        for x in 0..w {
            let src = i64::from(x) - off;
            if (0..i64::from(w)).contains(&src) {
                out.set(x, y, image.get(src as u32, y));
            }
        }
    }
    out
}

/// Black vertical bars on white, sheared by `degrees`. The seed varies bar
/// count, widths and spacing; seed 0 is a fixed layout.
pub fn stroke_image(degrees: f64, seed_value: u64) -> LineImage {
    let mut rng = seed::rng(seed::derive(seed_value, "synth.stroke"));
    let (bars, widths, gaps): (usize, Vec<u32>, Vec<u32>) = if seed_value == 0 {
        (5, vec![4; 5], vec![18; 5])
    } else {
        let n = rng.random_range(3..=7);
        (
            n,
            (0..n).map(|_| rng.random_range(2..=6)).collect(),
            (0..n).map(|_| rng.random_range(10..=24)).collect(),
        )
    };
    let h = STROKE_HEIGHT;
    let margin = h + 8;
    let span: u32 = widths.iter().sum::<u32>() + gaps[..bars - 1].iter().sum::<u32>();
    let w = span + 2 * margin;
    let mut ink = vec![false; w as usize];
    let mut x = margin;
    for i in 0..bars {
        for c in x..x + widths[i] {
            ink[c as usize] = true;
        }
        x += widths[i] + gaps[i];
    }
    let upright = LineImage::from_fn(w, h, |x, y| {
        if ink[x as usize] && (2..h - 2).contains(&y) {
            0
        } else {
            255
        }
    });
    shear_rows(&upright, degrees, 255)
}

/// Rendering parameters of one synthetic writer.
#[derive(Clone, Debug, PartialEq)]
pub struct LineStyle {
    pub pen: u8,
    pub slant: f64,
    pub word_gap: u32,
    pub char_height: u32,
    pub stroke: u32,
    pub background: u8,
}

impl LineStyle {
    /// Random but well-formed writer style.
    pub fn random(rng: &mut impl Rng) -> Self {
        LineStyle {
            pen: rng.random_range(10..=110),
            slant: [-20.0, -5.0, 0.0, 5.0, 15.0, 30.0][rng.random_range(0..6)],
            word_gap: rng.random_range(8..=26),
            char_height: rng.random_range(14..=30),
            stroke: rng.random_range(1..=3),
            background: rng.random_range(225..=255),
        }
    }
}

fn draw_segment(canvas: &mut [bool], w: u32, h: u32, a: (f64, f64), b: (f64, f64), thick: u32) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1) * 2;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let cx = a.0 + (b.0 - a.0) * t;
        let cy = a.1 + (b.1 - a.1) * t;
        for dy in 0..thick {
            for dx in 0..thick {
                let x = cx.round() as i64 + i64::from(dx);
                let y = cy.round() as i64 + i64::from(dy);
                if (0..i64::from(w)).contains(&x) && (0..i64::from(h)).contains(&y) {
                    canvas[y as usize * w as usize + x as usize] = true;
                }
            }
        }
    }
}

/// Handwriting-like line: words of random glyph strokes rendered with the
/// writer's pen intensity, slant, spacing and size.
pub fn text_line(style: &LineStyle, words: usize, seed_value: u64) -> LineImage {
    let mut rng = seed::rng(seed::derive(seed_value, "synth.text_line"));
    let ch = style.char_height;
    let cw = (ch * 3 / 5).max(4);
    let h = ch * 2 + 8;
    let margin = h + 6;
    let letters: Vec<usize> = (0..words.max(1)).map(|_| rng.random_range(2..=6)).collect();
    let text_w: u32 = letters.iter().map(|&n| n as u32 * (cw + 2)).sum::<u32>()
        + style.word_gap * (letters.len() as u32 - 1);
    let w = text_w + 2 * margin;
    let mut ink = vec![false; (w * h) as usize];
    let base = f64::from(h - 4);
    let top = base - f64::from(ch);
    let mut x = f64::from(margin);
    for (wi, &n) in letters.iter().enumerate() {
        for _ in 0..n {
            let x0 = x;
            let x1 = x + f64::from(cw);
            // an upright stem plus one or two connecting strokes
            draw_segment(&mut ink, w, h, (x0, top), (x0, base), style.stroke);
            let strokes = rng.random_range(1..=2);
            for _ in 0..strokes {
                let ya = rng.random_range(top..base);
                let yb = rng.random_range(top..base);
                draw_segment(&mut ink, w, h, (x0, ya), (x1, yb), style.stroke);
            }
            if rng.random_bool(0.3) {
                let asc = (top - f64::from(ch) * 0.6).max(1.0);
                draw_segment(&mut ink, w, h, (x1, asc), (x1, base), style.stroke);
            }
            x += f64::from(cw + 2);
        }
        if wi + 1 < letters.len() {
            x += f64::from(style.word_gap);
        }
    }
    let noise = Normal::new(0.0, 4.0).expect("valid normal");
    let upright = LineImage::from_fn(w, h, |x, y| {
        if ink[(y * w + x) as usize] {
            let v = f64::from(style.pen) + noise.sample(&mut rng);
            v.round().clamp(0.0, f64::from(style.pen) + 20.0) as u8
        } else {
            style.background
        }
    });
    shear_rows(&upright, style.slant, style.background)
}

const DEMO_WORDS: [&str; 12] = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "pack", "my", "box", "with",
];

/// Writes a synthetic corpus of PNG lines plus `manifest.jsonl` into `dir`.
/// Writers `w0..w{writers-1}`; the last `novel` of them are marked novel.
pub fn demo_corpus(
    dir: &Path,
    writers: usize,
    novel: usize,
    per_writer: usize,
    seed_value: u64,
) -> Result<Manifest, CorpusError> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|source| CorpusError::Io {
        path: img_dir.clone(),
        source,
    })?;
    let mut rng = seed::rng(seed::derive(seed_value, "synth.demo_corpus"));
    let mut records = Vec::new();
    let mut known = BTreeSet::new();
    let mut novel_set = BTreeSet::new();
    for wi in 0..writers {
        let style = LineStyle::random(&mut rng);
        let writer = format!("w{wi}");
        let is_novel = wi >= writers.saturating_sub(novel);
        if is_novel {
            novel_set.insert(writer.clone());
        } else {
            known.insert(writer.clone());
        }
        for si in 0..per_writer {
            let words = rng.random_range(2..=4);
            let transcript: Vec<&str> = (0..words)
                .map(|_| DEMO_WORDS[rng.random_range(0..DEMO_WORDS.len())])
                .collect();
            let id = format!("{writer}-{si:03}");
            let image = text_line(&style, words, seed::derive_indexed(seed_value, &writer, si as u64));
            let rel = Path::new("images").join(format!("{id}.png"));
            image.save_png(&dir.join(&rel))?;
            records.push(ManifestRecord {
                id,
                image: rel,
                labels: SampleLabels {
                    writer: Some(writer.clone()),
                    transcript: Some(transcript.join(" ")),
                    appearance: Some(Appearance::OriginalWhite),
                    ..Default::default()
                },
            });
        }
    }
    let alphabet = DEMO_WORDS.iter().flat_map(|w| w.chars()).chain([' ']).collect();
    let manifest = Manifest::new(records, alphabet, known, novel_set)?.with_base_dir(dir);
    crate::corpus::write_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Vertices of a regular polygon of `n` points at `radius` around the origin.
pub fn polygon_centers(n: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            [radius * t.cos(), radius * t.sin()]
        })
        .collect()
}

/// Isotropic Gaussian cloud of `n` points around `center`.
pub fn gaussian_blob(center: [f64; 2], sigma: f64, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    (0..n)
        .map(|_| vec![center[0] + normal.sample(rng), center[1] + normal.sample(rng)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shear_zero_is_identity() {
        let img = text_line(&LineStyle::random(&mut seed::rng(1)), 3, 2);
        assert_eq!(shear_rows(&img, 0.0, 255), img);
    }

    #[test]
    fn text_lines_are_deterministic() {
        let style = LineStyle::random(&mut seed::rng(4));
        assert_eq!(text_line(&style, 3, 9), text_line(&style, 3, 9));
    }

    #[test]
    fn stroke_images_fit_their_canvas() {
        for &a in &[-45.0, 45.0] {
            for s in 0..10 {
                let img = stroke_image(a, s);
                let upright = stroke_image(0.0, s);
                let count = |i: &LineImage| i.pixels().iter().filter(|&&v| v == 0).count();
                assert_eq!(count(&img), count(&upright));
            }
        }
    }
}
