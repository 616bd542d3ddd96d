//! Object location masks from time-averaged cross-attention.
//!
//! Each object's class phrase is located in the prompt, the attention maps
//! of those tokens are max-normalized per step and averaged over the whole
//! inversion, resampled to latent resolution and thresholded with Otsu's
//! method. Objects that carry a user mask skip all of this.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compose::ObjectSpec;
use crate::error::{Error, Result};
use crate::invert::AttentionRecord;

pub const DEFAULT_BINS: usize = 256;

const DETERMINERS: [&str; 3] = ["a", "an", "the"];

/// Non-negative finite spatial map.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    values: Array2<f64>,
}

impl Heatmap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty heatmap {h}x{w}")));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(
                "heatmap values must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let arr = Array2::from_shape_vec((height, width), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[[y, x]]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Row-major position of the largest value (first one on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((y, x), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (y, x);
            }
        }
        best
    }

    /// Scaled so the maximum is 1; an all-zero map is returned unchanged.
    pub fn max_normalized(&self) -> Heatmap {
        let m = self.max();
        if m > 0.0 {
            Heatmap {
                values: self.values.mapv(|v| v / m),
            }
        } else {
            self.clone()
        }
    }
}

/// `{0,1}` grid marking one object's location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    values: Array2<bool>,
}

impl BinaryMask {
    pub fn new(values: Array2<bool>) -> Self {
        Self { values }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            values: Array2::from_shape_fn((height, width), |(y, x)| f(y, x)),
        }
    }

    pub fn full(height: usize, width: usize, value: bool) -> Self {
        Self {
            values: Array2::from_elem((height, width), value),
        }
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[[y, x]]
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.values
            .iter()
            .zip(other.values.iter())
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let inter = self.intersection_count(other);
        let union = self
            .values
            .iter()
            .zip(other.values.iter())
            .filter(|(a, b)| **a || **b)
            .count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Row-major bytes, 0 or 255.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| if v { 255 } else { 0 }).collect()
    }

    /// Nearest-neighbour resize (pixel-centre sampling).
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> BinaryMask {
        let (in_h, in_w) = self.dim();
        if (in_h, in_w) == (out_h, out_w) {
            return self.clone();
        }
        let src = |o: usize, n_out: usize, n_in: usize| {
            (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1)
        };
        BinaryMask::from_fn(out_h, out_w, |y, x| {
            self.values[[src(y, out_h, in_h), src(x, out_w, in_w)]]
        })
    }
}

/// Lowercased whitespace tokens with surrounding punctuation trimmed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Phrase tokens without determiners.
pub fn phrase_tokens(phrase: &str) -> Vec<String> {
    tokenize(phrase)
        .into_iter()
        .filter(|t| !DETERMINERS.contains(&t.as_str()))
        .collect()
}

/// Indices of the first contiguous occurrence of the class phrase in the prompt.
pub fn select_tokens(prompt_tokens: &[String], class_phrase: &str) -> Result<Vec<usize>> {
    let needle = phrase_tokens(class_phrase);
    if needle.is_empty() || needle.len() > prompt_tokens.len() {
        return Err(Error::PhraseAbsent(class_phrase.to_string()));
    }
    prompt_tokens
        .windows(needle.len())
        .position(|w| w == needle.as_slice())
        .map(|start| (start..start + needle.len()).collect())
        .ok_or_else(|| Error::PhraseAbsent(class_phrase.to_string()))
}

/// Mean over steps and listed tokens of per-step max-normalized maps.
pub fn average_attention(rec: &AttentionRecord, token_indices: &[usize]) -> Result<Heatmap> {
    if rec.num_steps() == 0 {
        return Err(Error::EmptyRecord);
    }
    if token_indices.is_empty() {
        return Err(Error::Invalid("no tokens selected".into()));
    }
    if let Some(&bad) = token_indices.iter().find(|&&i| i >= rec.num_tokens()) {
        return Err(Error::Invalid(format!(
            "token index {bad} out of range for {} recorded tokens",
            rec.num_tokens()
        )));
    }
    let mut acc = Array2::<f64>::zeros(rec.map_dim());
    for step in 0..rec.num_steps() {
        for &tok in token_indices {
            let normalized = rec.map(step, tok).max_normalized();
            acc += normalized.as_array();
        }
    }
    acc /= (rec.num_steps() * token_indices.len()) as f64;
    Heatmap::new(acc)
}

/// Averages several attention layers after resampling each to `out_h × out_w`.
pub fn average_attention_layers(
    records: &[AttentionRecord],
    token_indices: &[usize],
    out_h: usize,
    out_w: usize,
) -> Result<Heatmap> {
    if records.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let mut acc = Array2::<f64>::zeros((out_h, out_w));
    for rec in records {
        let layer = resample_bilinear(&average_attention(rec, token_indices)?, out_h, out_w)?;
        acc += layer.as_array();
    }
    acc /= records.len() as f64;
    Heatmap::new(acc)
}

/// Corner-aligned bilinear resampling.
pub fn resample_bilinear(h: &Heatmap, out_h: usize, out_w: usize) -> Result<Heatmap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "resample target {out_h}x{out_w} must be positive"
        )));
    }
    let (in_h, in_w) = h.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return Ok(h.clone());
    }
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let src = h.as_array();
    let out = Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, in_h);
        let (x0, x1, fx) = coord(x, out_w, in_w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        // clamp tiny negative rounding
        (top * (1.0 - fy) + bottom * fy).max(0.0)
    });
    Heatmap::new(out)
}

/// Equal-width histogram over `[min, max]`; the maximum lands in the last bin.
pub(crate) fn bin_index(v: f64, min: f64, width: f64, bins: usize) -> usize {
    (((v - min) / width).floor() as usize).min(bins - 1)
}

/// Otsu threshold over `bins` equal-width bins, returned as a bin edge.
///
/// Between-class variance is compared exactly: on the bin-index scale it is
/// `(n1·s0 − n0·s1)² / (n0·n1·N²)`, so candidates are ranked by cross
/// multiplication of integers. Ties go to the smallest edge.
pub fn otsu_threshold(h: &Heatmap, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Invalid(format!("bins must be at least 2, got {bins}")));
    }
    let (min, max) = (h.min(), h.max());
    if max <= min {
        return Err(Error::DegenerateHistogram);
    }
    let width = (max - min) / bins as f64;
    let mut hist = vec![0u128; bins];
    for &v in h.as_array().iter() {
        hist[bin_index(v, min, width, bins)] += 1;
    }
    let total_n: u128 = hist.iter().sum();
    let total_s: u128 = hist.iter().enumerate().map(|(j, &c)| j as u128 * c).sum();

    let mut best: Option<(Score, usize)> = None;
    let (mut n0, mut s0) = (0u128, 0u128);
    for k in 1..bins {
        n0 += hist[k - 1];
        s0 += (k as u128 - 1) * hist[k - 1];
        let (n1, s1) = (total_n - n0, total_s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = Score::new(n1 * s0, n0 * s1, n0 * n1);
        if best.as_ref().is_none_or(|(b, _)| score.beats(b)) {
            best = Some((score, k));
        }
    }
    let (_, k) = best.ok_or(Error::DegenerateHistogram)?;
    Ok(min + k as f64 * width)
}

/// `diff² / den` kept as an exact rational where it fits in `u128`.
struct Score {
    num: Option<u128>,
    den: u128,
    approx: f64,
}

impl Score {
    fn new(a: u128, b: u128, den: u128) -> Self {
        let diff = a.abs_diff(b);
        let num = diff.checked_mul(diff);
        let approx = (diff as f64) * (diff as f64) / den as f64;
        Self { num, den, approx }
    }

    fn beats(&self, other: &Score) -> bool {
        if let (Some(a), Some(b)) = (self.num, other.num) {
            if let (Some(l), Some(r)) = (a.checked_mul(other.den), b.checked_mul(self.den)) {
                return l > r;
            }
        }
        self.approx > other.approx
    }
}

/// `1` where the value is strictly above `threshold`.
pub fn binarize(h: &Heatmap, threshold: f64) -> BinaryMask {
    BinaryMask::new(h.as_array().mapv(|v| v > threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskProvenance {
    User,
    Attention,
}

/// A resolved mask plus how it was obtained.
#[derive(Clone, Debug)]
pub struct ObjectMask {
    pub mask: BinaryMask,
    pub provenance: MaskProvenance,
    /// Averaged heatmap at latent resolution, when attention-derived.
    pub heatmap: Option<Heatmap>,
    pub threshold: Option<f64>,
}

/// One mask per object at latent resolution, with provenance and heatmaps.
pub fn make_object_masks(
    rec: Option<&AttentionRecord>,
    objects: &[ObjectSpec],
    prompt: &str,
    latent_h: usize,
    latent_w: usize,
    bins: usize,
) -> Result<Vec<ObjectMask>> {
    let prompt_tokens = tokenize(prompt);
    objects
        .iter()
        .enumerate()
        .map(|(index, obj)| {
            if let Some(user) = &obj.mask {
                return Ok(ObjectMask {
                    mask: user.resize_nearest(latent_h, latent_w),
                    provenance: MaskProvenance::User,
                    heatmap: None,
                    threshold: None,
                });
            }
            let rec = rec.ok_or(Error::MissingMask { index })?;
            derive_mask(rec, &prompt_tokens, &obj.class_phrase, latent_h, latent_w, bins)
                .map_err(|e| e.for_object(index, &obj.class_phrase))
        })
        .collect()
}

fn derive_mask(
    rec: &AttentionRecord,
    prompt_tokens: &[String],
    class_phrase: &str,
    latent_h: usize,
    latent_w: usize,
    bins: usize,
) -> Result<ObjectMask> {
    let tokens = select_tokens(prompt_tokens, class_phrase)?;
    let avg = average_attention(rec, &tokens)?;
    let heatmap = resample_bilinear(&avg, latent_h, latent_w)?;
    let threshold = otsu_threshold(&heatmap, bins)?;
    Ok(ObjectMask {
        mask: binarize(&heatmap, threshold),
        provenance: MaskProvenance::Attention,
        heatmap: Some(heatmap),
        threshold: Some(threshold),
    })
}

/// One binary mask per object at latent resolution.
pub fn make_masks(
    rec: Option<&AttentionRecord>,
    objects: &[ObjectSpec],
    prompt: &str,
    latent_h: usize,
    latent_w: usize,
    bins: usize,
) -> Result<Vec<BinaryMask>> {
    Ok(
        make_object_masks(rec, objects, prompt, latent_h, latent_w, bins)?
            .into_iter()
            .map(|m| m.mask)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    /// Brute force: every interior edge, classes formed pixel by pixel.
    fn exhaustive_otsu(h: &Heatmap, bins: usize) -> f64 {
        let (min, max) = (h.min(), h.max());
        let width = (max - min) / bins as f64;
        let idx: Vec<i128> = h
            .as_array()
            .iter()
            .map(|&v| bin_index(v, min, width, bins) as i128)
            .collect();
        let mut best: Option<(i128, i128, usize)> = None;
        for k in 1..bins {
            let (mut n0, mut n1, mut s0, mut s1) = (0i128, 0i128, 0i128, 0i128);
            for &j in &idx {
                if j < k as i128 {
                    n0 += 1;
                    s0 += j;
                } else {
                    n1 += 1;
                    s1 += j;
                }
            }
            if n0 == 0 || n1 == 0 {
                continue;
            }
            let d = n1 * s0 - n0 * s1;
            let (num, den) = (d * d, n0 * n1);
            let better = match best {
                None => true,
                Some((bn, bd, _)) => num * bd > bn * den,
            };
            if better {
                best = Some((num, den, k));
            }
        }
        min + best.unwrap().2 as f64 * width
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Heatmap {
        let v = (0..h * w).map(|_| rng.random::<f64>().powi(2)).collect();
        Heatmap::from_vec(h, w, v).unwrap()
    }

    #[test]
    fn select_tokens_examples() {
        let p = toks("a dog with a teapot on the beach");
        assert_eq!(select_tokens(&p, "a dog").unwrap(), vec![1]);
        assert_eq!(select_tokens(&p, "a teapot").unwrap(), vec![4]);
        assert!(matches!(
            select_tokens(&p, "a cat"),
            Err(Error::PhraseAbsent(_))
        ));
        assert_eq!(select_tokens(&p, "The Beach").unwrap(), vec![7]);
        assert_eq!(select_tokens(&p, "teapot on").unwrap(), vec![4, 5]);
        assert!(select_tokens(&p, "the").is_err());
    }

    #[test]
    fn resample_constant_and_midpoint() {
        let c = Heatmap::from_vec(2, 3, vec![0.7; 6]).unwrap();
        let r = resample_bilinear(&c, 5, 4).unwrap();
        assert_eq!(r.dim(), (5, 4));
        assert!(r.as_array().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let m = Heatmap::from_vec(2, 2, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let r = resample_bilinear(&m, 3, 3).unwrap();
        assert_eq!(r.get(1, 1), 3.0);
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(2, 2), 6.0);
        assert!(resample_bilinear(&m, 0, 3).is_err());
    }

    #[test]
    fn resample_bump_tracks_argmax() {
        let bump = |cy: f64, cx: f64| {
            Heatmap::new(Array2::from_shape_fn((8, 8), |(y, x)| {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                (-d2 / 2.0).exp()
            }))
            .unwrap()
        };
        for (cy, cx) in [(3.0, 4.0), (1.0, 6.0), (5.0, 2.0)] {
            let h = bump(cy, cx);
            let (ay, ax) = h.argmax();
            let (by, bx) = resample_bilinear(&h, 16, 16).unwrap().argmax();
            assert!((by as i64 - 2 * ay as i64).abs() <= 1, "{by} vs {ay}");
            assert!((bx as i64 - 2 * ax as i64).abs() <= 1, "{bx} vs {ax}");
        }
    }

    #[test]
    fn otsu_two_spikes() {
        let h = Heatmap::from_vec(1, 6, vec![1.0, 1.0, 1.0, 9.0, 9.0, 9.0]).unwrap();
        let t = otsu_threshold(&h, 8).unwrap();
        assert_eq!(t, exhaustive_otsu(&h, 8));
        assert_eq!(t, 2.0);
        assert_eq!(binarize(&h, t).count(), 3);
    }

    #[test]
    fn otsu_bimodal_two_bins() {
        let h = Heatmap::from_vec(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let t = otsu_threshold(&h, 2).unwrap();
        assert_eq!(t, 0.5);
        let m = binarize(&h, t);
        assert_eq!(m.as_array().iter().copied().collect::<Vec<_>>(), vec![false, true, false, true]);
    }

    #[test]
    fn otsu_errors() {
        let flat = Heatmap::from_vec(2, 2, vec![0.3; 4]).unwrap();
        assert!(matches!(
            otsu_threshold(&flat, 256),
            Err(Error::DegenerateHistogram)
        ));
        let h = Heatmap::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(otsu_threshold(&h, 1).is_err());
    }

    #[test]
    fn otsu_matches_exhaustive_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let h = random_map(&mut rng, 17, 23);
            for bins in [2, 7, 256] {
                assert_eq!(otsu_threshold(&h, bins).unwrap(), exhaustive_otsu(&h, bins));
            }
        }
    }

    #[test]
    fn binarize_extremes() {
        let h = Heatmap::from_vec(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
        assert_eq!(binarize(&h, 0.1).count(), 3);
        assert_eq!(binarize(&h, 0.9).count(), 0);
        assert_eq!(binarize(&h, 5.0).count(), 0);
    }

    #[test]
    fn average_is_scale_stable() {
        let a = Heatmap::from_vec(2, 2, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let a3 = Heatmap::new(a.as_array() * 3.0).unwrap();
        let mut rec = AttentionRecord::new(vec!["x".into()]);
        rec.push(10, vec![a.clone()]).unwrap();
        rec.push(5, vec![a3]).unwrap();
        let avg = average_attention(&rec, &[0]).unwrap();
        assert_eq!(avg, a.max_normalized());

        let empty = AttentionRecord::new(vec!["x".into()]);
        assert!(matches!(
            average_attention(&empty, &[0]),
            Err(Error::EmptyRecord)
        ));
        assert!(average_attention(&rec, &[1]).is_err());
        assert!(average_attention(&rec, &[]).is_err());
    }

    #[test]
    fn average_permutation_invariant_over_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps: Vec<Heatmap> = (0..6).map(|_| random_map(&mut rng, 5, 5)).collect();
        let build = |order: &[usize]| {
            let mut rec = AttentionRecord::new(vec!["t".into()]);
            for &i in order {
                rec.push(i + 1, vec![maps[i].clone()]).unwrap();
            }
            average_attention(&rec, &[0]).unwrap()
        };
        let a = build(&[0, 1, 2, 3, 4, 5]);
        let b = build(&[5, 3, 1, 0, 4, 2]);
        for (x, y) in a.as_array().iter().zip(b.as_array().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn user_masks_pass_through() {
        let mask = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let objects = vec![ObjectSpec::new("a dog", vec![0.0], "dog").with_mask(mask.clone())];
        let out = make_object_masks(None, &objects, "a cat", 4, 4, 256).unwrap();
        assert_eq!(out[0].mask, mask);
        assert_eq!(out[0].provenance, MaskProvenance::User);

        // resampled by nearest neighbour when sized differently
        let out = make_masks(None, &objects, "a cat", 8, 8, 256).unwrap();
        assert_eq!(out[0].dim(), (8, 8));
        assert_eq!(out[0].count(), 32);
    }

    #[test]
    fn missing_source_and_degenerate_errors_name_object() {
        let objects = vec![ObjectSpec::new("a dog", vec![0.0], "dog")];
        assert!(matches!(
            make_masks(None, &objects, "a dog", 4, 4, 256),
            Err(Error::MissingMask { index: 0 })
        ));
        let mut rec = AttentionRecord::new(tokenize("a dog"));
        let flat = Heatmap::from_vec(4, 4, vec![0.5; 16]).unwrap();
        rec.push(1, vec![flat.clone(), flat]).unwrap();
        let err = make_masks(Some(&rec), &objects, "a dog", 4, 4, 256).unwrap_err();
        match err {
            Error::Object { index, source, .. } => {
                assert_eq!(index, 0);
                assert!(matches!(*source, Error::DegenerateHistogram));
            }
            other => panic!("unexpected {other:?}"),
        }
        let cat = vec![ObjectSpec::new("a cat", vec![0.0], "cat")];
        assert!(make_masks(Some(&rec), &cat, "a dog", 4, 4, 256).is_err());
    }

    proptest! {
        #[test]
        fn otsu_mask_invariant_to_affine_rescale(seed in any::<u64>(), a in 0.1f64..10.0, b in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_map(&mut rng, 12, 12);
            let g = Heatmap::new(h.as_array().mapv(|v| a * v + b)).unwrap();
            let mh = binarize(&h, otsu_threshold(&h, 64).unwrap());
            let mg = binarize(&g, otsu_threshold(&g, 64).unwrap());
            prop_assert_eq!(mh, mg);
        }

        #[test]
        fn make_masks_shape_matches_latent(h in 1usize..20, w in 1usize..20) {
            let objects = vec![ObjectSpec::new("a dog", vec![], "dog")
                .with_mask(BinaryMask::from_fn(7, 5, |y, x| (y + x) % 2 == 0))];
            let out = make_masks(None, &objects, "", h, w, 256).unwrap();
            prop_assert_eq!(out[0].dim(), (h, w));
        }
    }
}
