//! Temporal fusion of per-frame feature maps.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{EncodingConfig, PositionalEncoding};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::sits::{closest_order, Raster, TimedSeries, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtaeConfig {
    pub key_dim: usize,
    /// Hidden width of the output MLP; the feature width when absent.
    pub mlp_hidden: Option<usize>,
}

impl Default for LtaeConfig {
    fn default() -> Self {
        Self {
            key_dim: 8,
            mlp_hidden: None,
        }
    }
}

/// Per-frame features `[T, C, H, W]` with the matching date encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries<F> {
    pub features: Tensor<F>,
    pub encoding: Option<PositionalEncoding>,
}

impl<F: Real> FeatureSeries<F> {
    pub fn new(features: Tensor<F>, encoding: Option<PositionalEncoding>) -> Result<Self> {
        if features.shape().len() != 4 {
            return Err(Error::domain(format!(
                "features must be [T, C, H, W], got {:?}",
                features.shape()
            )));
        }
        let t = features.shape()[0];
        if t == 0 {
            return Err(Error::domain("a feature series needs at least one frame"));
        }
        if !features.is_finite() {
            return Err(Error::domain("features contain non-finite values"));
        }
        if let Some(e) = &encoding {
            if e.rows() != t {
                return Err(Error::domain(format!(
                    "{} encoding rows for {t} frames",
                    e.rows()
                )));
            }
        }
        Ok(Self { features, encoding })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Softmax weights per head, frame and pixel: `[heads, T, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub heads: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f32>,
}

impl AttentionMaps {
    pub fn weight(&self, head: usize, frame: usize, y: usize, x: usize) -> f32 {
        self.weights[((head * self.frames + frame) * self.height + y) * self.width + x]
    }

    /// Mean weight of one frame over heads and pixels.
    pub fn frame_mean(&self, frame: usize) -> f64 {
        let hw = self.height * self.width;
        let mut acc = 0.0;
        for h in 0..self.heads {
            let start = (h * self.frames + frame) * hw;
            acc += self.weights[start..start + hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        acc / (self.heads * hw) as f64
    }

    /// Largest deviation from 1 of a per-(head, pixel) sum over frames.
    pub fn max_normalization_error(&self) -> f64 {
        let hw = self.height * self.width;
        let mut worst = 0.0f64;
        for h in 0..self.heads {
            for p in 0..hw {
                let s: f64 = (0..self.frames)
                    .map(|t| self.weights[(h * self.frames + t) * hw + p] as f64)
                    .sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Per-pixel master-query temporal attention followed by a pixel-wise MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Ltae2d {
    pe_w: ParamId,
    pe_b: ParamId,
    key_w: ParamId,
    key_b: ParamId,
    query: ParamId,
    mlp_in: Conv2d,
    mlp_out: Conv2d,
    channels: usize,
    heads: usize,
    enc_dim: usize,
}

impl Ltae2d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        channels: usize,
        cfg: &LtaeConfig,
        enc: &EncodingConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        enc.validate()?;
        let heads = enc.heads;
        if channels % heads != 0 {
            return Err(Error::config(format!(
                "feature width {channels} is not divisible by {heads} heads"
            )));
        }
        if cfg.key_dim == 0 {
            return Err(Error::config("key_dim must be at least 1"));
        }
        let g = channels / heads;
        let d = enc.head_dim();
        let dk = cfg.key_dim;
        let hidden = cfg.mlp_hidden.unwrap_or(channels);
        let pe_w = store.add(
            format!("{name}.pe_w"),
            Tensor::uniform(&[heads, g, d], (3.0 / d as f64).sqrt(), rng),
        );
        let pe_b = store.add(format!("{name}.pe_b"), Tensor::zeros(&[heads, g]));
        let key_w = store.add(
            format!("{name}.key_w"),
            Tensor::uniform(&[heads, dk, g], (3.0 / g as f64).sqrt(), rng),
        );
        let key_b = store.add(format!("{name}.key_b"), Tensor::zeros(&[heads, dk]));
        let query = store.add(
            format!("{name}.query"),
            Tensor::uniform(&[heads, dk], 1.0, rng),
        );
        let mlp_in = Conv2d::new(store, &format!("{name}.mlp_in"), channels, hidden, 1, 2f64.sqrt(), rng);
        let mlp_out = Conv2d::new(store, &format!("{name}.mlp_out"), hidden, channels, 1, 1.0, rng);
        Ok(Self {
            pe_w,
            pe_b,
            key_w,
            key_b,
            query,
            mlp_in,
            mlp_out,
            channels,
            heads,
            enc_dim: d,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Fuses `x: [T, C, H, W]` into `[1, C, H, W]`. Also returns the attention
    /// node, whose weights are available through [`Tape::attention_weights`].
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        encoding: &PositionalEncoding,
    ) -> Result<(Var, Var)> {
        let (t, c, _, _) = tape.value(x).dims4();
        if t == 0 {
            return Err(Error::domain("cannot fuse an empty series"));
        }
        if c != self.channels {
            return Err(Error::config(format!(
                "attention built for {} channels, features have {c}",
                self.channels
            )));
        }
        if encoding.rows() != t || encoding.dim() != self.enc_dim {
            return Err(Error::domain(format!(
                "encoding is {}x{}, expected {t}x{}",
                encoding.rows(),
                encoding.dim(),
                self.enc_dim
            )));
        }
        let pe: Vec<F> = encoding.values().iter().map(|&v| F::lit(v)).collect();
        let pe_w = tape.param(self.pe_w);
        let pe_b = tape.param(self.pe_b);
        let key_w = tape.param(self.key_w);
        let key_b = tape.param(self.key_b);
        let query = tape.param(self.query);
        let attended = tape.temporal_attention(x, &pe, self.enc_dim, pe_w, pe_b, key_w, key_b, query);
        let hidden = self.mlp_in.forward(tape, attended);
        let hidden = tape.leaky_relu(hidden, F::zero());
        let out = self.mlp_out.forward(tape, hidden);
        Ok((out, attended))
    }
}

/// Runs [`Ltae2d`] on a standalone feature series, returning the fused map
/// `[C, H, W]` and the attention weights.
pub fn ltae2d_fuse<F: Real>(
    series: &FeatureSeries<F>,
    ltae: &Ltae2d,
    store: &ParamStore<F>,
) -> Result<(Tensor<F>, AttentionMaps)> {
    let encoding = series
        .encoding
        .as_ref()
        .ok_or_else(|| Error::domain("attention fusion needs date encodings"))?;
    let (t, c, h, w) = series.features.dims4();
    let mut tape = Tape::new(store);
    let x = tape.input(series.features.clone());
    let (out, attn) = ltae.forward(&mut tape, x, encoding)?;
    let weights = tape
        .attention_weights(attn)
        .expect("attention node")
        .iter()
        .map(|v| v.as_f64() as f32)
        .collect();
    let fused = tape.value(out).clone().reshaped(&[c, h, w]);
    Ok((
        fused,
        AttentionMaps {
            heads: ltae.heads,
            frames: t,
            height: h,
            width: w,
            weights,
        },
    ))
}

/// Per-pixel, per-channel median over frames; the mean of the two middle
/// values for an even count.
pub fn median_reference(series: &TimedSeries) -> Raster {
    let stack = series.stack();
    let t = stack.shape()[0];
    let (c, h, w) = series.frame_dims();
    let mut out = Array3::<f32>::zeros((c, h, w));
    let mut buf = vec![0.0f32; t];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = stack[[k, ch, y, x]];
                }
                buf.sort_by(f32::total_cmp);
                out[[ch, y, x]] = if t % 2 == 1 {
                    buf[t / 2]
                } else {
                    (buf[t / 2 - 1] + buf[t / 2]) / 2.0
                };
            }
        }
    }
    Raster::new(out, series.value_range()).expect("non-empty frames")
}

/// Frame order fed to recursive fusion: all frames in series order, then the
/// frames closest to `t_ref` repeated until the length is a power of two.
pub fn padded_order(times: &[Timestamp], t_ref: Timestamp) -> Vec<usize> {
    let n = times.len();
    let target = n.next_power_of_two();
    let closest = closest_order(times, t_ref);
    let mut order: Vec<usize> = (0..n).collect();
    order.extend(closest.iter().cycle().take(target - n));
    order
}

/// Number of pairwise fusion rounds for `t` frames.
pub fn fusion_rounds(t: usize) -> usize {
    t.next_power_of_two().trailing_zeros() as usize
}

/// Pairwise recursive fusion with one shared two-input residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct RecursiveFusion {
    first: Conv2d,
    second: Conv2d,
}

impl RecursiveFusion {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Conv2d::new(store, &format!("{name}.conv1"), 2 * channels, channels, 3, 2f64.sqrt(), rng),
            second: Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 0.1, rng),
        }
    }

    /// Fuses `x: [T, C, H, W]` following `order` (a power-of-two sequence of
    /// frame indices, see [`padded_order`]). Each round pairs state `i` with
    /// state `L - 1 - i` and computes `a + block([a, b])`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, x: Var, order: &[usize]) -> Var {
        assert!(order.len().is_power_of_two(), "fusion order must have power-of-two length");
        let mut states: Vec<Var> = order.iter().map(|&k| tape.slice_batch(x, k, 1)).collect();
        while states.len() > 1 {
            let half = states.len() / 2;
            let a = tape.concat_batch(&states[..half]);
            let b_parts: Vec<Var> = states[half..].iter().rev().copied().collect();
            let b = tape.concat_batch(&b_parts);
            let joined = tape.concat_channels(&[a, b]);
            let h = self.first.forward(tape, joined);
            let h = tape.leaky_relu(h, F::lit(0.2));
            let h = self.second.forward(tape, h);
            let fused = tape.add(a, h);
            states = (0..half).map(|i| tape.slice_batch(fused, i, 1)).collect();
        }
        states[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::relative_encoding;
    use crate::nn::check_gradients;
    use crate::sits::Frame;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn enc_cfg(heads: usize) -> EncodingConfig {
        EncodingConfig::new(1000.0, 4 * heads, heads).unwrap()
    }

    fn build<F: Real>(c: usize, heads: usize, seed: u64) -> (ParamStore<F>, Ltae2d) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ltae = Ltae2d::new(&mut store, "ltae", c, &LtaeConfig::default(), &enc_cfg(heads), &mut rng).unwrap();
        // non-zero biases so the oracle exercises every term
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("_b") || store.name(id).ends_with(".bias") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::uniform(&shape, 0.3, &mut rng));
            }
        }
        (store, ltae)
    }

    fn random_series<F: Real>(t: usize, c: usize, h: usize, w: usize, heads: usize, seed: u64) -> FeatureSeries<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Tensor::uniform(&[t, c, h, w], 1.0, &mut rng);
        let days: Vec<Timestamp> = (0..t).map(|_| Timestamp(rng.gen_range(-80..80))).collect();
        let enc = relative_encoding(&days, Timestamp(0), &enc_cfg(heads)).unwrap();
        FeatureSeries::new(features, Some(enc)).unwrap()
    }

    /// Straight-line per-pixel evaluation of attention plus MLP.
    fn oracle(series: &FeatureSeries<f64>, store: &ParamStore<f64>, heads: usize) -> (Vec<f64>, Vec<f64>) {
        let (t, c, h, w) = series.features.dims4();
        let g = c / heads;
        let enc = series.encoding.as_ref().unwrap();
        let d = enc.dim();
        let p = |n: &str| store.get(store.find(n).unwrap()).data().to_vec();
        let (pe_w, pe_b, key_w, key_b, q) = (p("ltae.pe_w"), p("ltae.pe_b"), p("ltae.key_w"), p("ltae.key_b"), p("ltae.query"));
        let (w1, b1, w2, b2) = (p("ltae.mlp_in.weight"), p("ltae.mlp_in.bias"), p("ltae.mlp_out.weight"), p("ltae.mlp_out.bias"));
        let hidden = b1.len();
        let dk = q.len() / heads;
        let xs = series.features.data();
        let at = |k: usize, ch: usize, y: usize, x: usize| xs[((k * c + ch) * h + y) * w + x];
        let mut out = vec![0.0; c * h * w];
        let mut weights = vec![0.0; heads * t * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut attended = vec![0.0; c];
                for hd in 0..heads {
                    let mut scores = vec![0.0; t];
                    for k in 0..t {
                        let mut encoded = vec![0.0; g];
                        for j in 0..g {
                            let mut proj = pe_b[hd * g + j];
                            for i in 0..d {
                                proj += pe_w[(hd * g + j) * d + i] * enc.row(k)[i];
                            }
                            encoded[j] = at(k, hd * g + j, y, x) + proj;
                        }
                        let mut s = 0.0;
                        for i in 0..dk {
                            let mut key = key_b[hd * dk + i];
                            for j in 0..g {
                                key += key_w[(hd * dk + i) * g + j] * encoded[j];
                            }
                            s += q[hd * dk + i] * key;
                        }
                        scores[k] = s / (dk as f64).sqrt();
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for k in 0..t {
                        let a = (scores[k] - m).exp() / z;
                        weights[((hd * t + k) * h + y) * w + x] = a;
                        for j in 0..g {
                            attended[hd * g + j] += a * at(k, hd * g + j, y, x);
                        }
                    }
                }
                let hid: Vec<f64> = (0..hidden)
                    .map(|o| {
                        let v = b1[o] + (0..c).map(|i| w1[o * c + i] * attended[i]).sum::<f64>();
                        v.max(0.0)
                    })
                    .collect();
                for o in 0..c {
                    out[(o * h + y) * w + x] = b2[o] + (0..hidden).map(|i| w2[o * hidden + i] * hid[i]).sum::<f64>();
                }
            }
        }
        (out, weights)
    }

    #[test]
    fn matches_loop_oracle() {
        let (store, ltae) = build::<f64>(8, 2, 11);
        let series = random_series::<f64>(4, 8, 5, 5, 2, 12);
        let (fused, maps) = ltae2d_fuse(&series, &ltae, &store).unwrap();
        let (want, want_w) = oracle(&series, &store, 2);
        for (a, b) in fused.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in maps.weights.iter().zip(&want_w) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!(maps.max_normalization_error() < 1e-6);
    }

    #[test]
    fn single_frame_gets_full_weight() {
        let (store, ltae) = build::<f32>(8, 4, 1);
        let series = random_series::<f32>(1, 8, 3, 4, 4, 2);
        let (fused, maps) = ltae2d_fuse(&series, &ltae, &store).unwrap();
        assert!(maps.weights.iter().all(|&w| w == 1.0));
        // MLP applied to the frame itself
        let mut tape = Tape::new(&store);
        let x = tape.input(series.features.clone());
        let h = ltae.mlp_in.forward(&mut tape, x);
        let h = tape.leaky_relu(h, 0.0);
        let y = ltae.mlp_out.forward(&mut tape, h);
        assert_eq!(tape.value(y).data(), fused.data());
    }

    #[test]
    fn identical_frames_share_weights() {
        let (store, ltae) = build::<f64>(8, 2, 3);
        let mut series = random_series::<f64>(3, 8, 4, 4, 2, 4);
        let plane = 8 * 16;
        let data = series.features.data_mut();
        let copy = data[plane..2 * plane].to_vec();
        data[2 * plane..].copy_from_slice(&copy);
        let enc = series.encoding.as_ref().unwrap();
        let rows = vec![enc.row(0).to_vec(), enc.row(1).to_vec(), enc.row(1).to_vec()];
        series.encoding = Some(PositionalEncoding::from_rows(rows).unwrap());
        let (_, maps) = ltae2d_fuse(&series, &ltae, &store).unwrap();
        for hd in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(maps.weight(hd, 1, y, x), maps.weight(hd, 2, y, x));
                }
            }
        }
    }

    #[test]
    fn indivisible_width_is_config_error() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = Ltae2d::new(&mut store, "l", 6, &LtaeConfig::default(), &enc_cfg(4), &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (store, ltae) = build::<f64>(8, 2, 5);
        let series = random_series::<f64>(4, 8, 5, 5, 2, 6);
        let target = Tensor::uniform(&[1, 8, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let enc = series.encoding.clone().unwrap();
        let report = check_gradients(&store, 1e-5, |tape| {
            let x = tape.input(series.features.clone());
            let (y, _) = ltae.forward(tape, x, &enc).unwrap();
            let t = tape.input(target.clone());
            tape.mean_abs_diff(y, t)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn series_from_values(values: &[&[f32]]) -> TimedSeries {
        let frames = values
            .iter()
            .enumerate()
            .map(|(k, v)| Frame {
                raster: Raster::unit(Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap()).unwrap(),
                time: Timestamp(k as i64),
            })
            .collect();
        TimedSeries::new(frames, Timestamp(0)).unwrap()
    }

    #[test]
    fn median_cases() {
        let one = series_from_values(&[&[0.2, 0.7]]);
        assert_eq!(median_reference(&one), one.frames()[0].raster);
        let three = series_from_values(&[&[1.0], &[0.0], &[0.5]]);
        assert_eq!(median_reference(&three).data()[[0, 0, 0]], 0.5);
        let four = series_from_values(&[&[0.9], &[0.1], &[0.3], &[0.4]]);
        assert!((median_reference(&four).data()[[0, 0, 0]] - 0.35).abs() < 1e-7);
    }

    #[test]
    fn median_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Frame> = (0..4)
            .map(|k| Frame {
                raster: Raster::unit(Array3::from_shape_fn((3, 6, 5), |_| rng.gen())).unwrap(),
                time: Timestamp(k),
            })
            .collect();
        let s = TimedSeries::new(frames, Timestamp(0)).unwrap();
        let got = median_reference(&s);
        for ((c, y, x), v) in got.data().indexed_iter() {
            let mut vals: Vec<f32> = s.frames().iter().map(|f| f.raster.data()[[c, y, x]]).collect();
            vals.sort_by(f32::total_cmp);
            assert_eq!(*v, (vals[1] + vals[2]) / 2.0);
        }
    }

    #[test]
    fn padding_repeats_closest_frames() {
        let times: Vec<Timestamp> = [-40, -12, 3, 20, 41].iter().map(|&d| Timestamp(d)).collect();
        let order = padded_order(&times, Timestamp(0));
        assert_eq!(order.len(), 8);
        // independent nearest-date sort
        let mut by_gap: Vec<(i64, i64, usize)> = times.iter().enumerate().map(|(k, t)| (t.0.abs(), t.0, k)).collect();
        by_gap.sort();
        let expected: Vec<usize> = by_gap.iter().take(3).map(|e| e.2).collect();
        assert_eq!(&order[5..], &expected[..]);
        assert_eq!(fusion_rounds(5), 3);
        assert_eq!(fusion_rounds(8), 3);
        assert_eq!(fusion_rounds(1), 0);
        assert_eq!(padded_order(&times[..1], Timestamp(0)), vec![0]);
    }

    #[test]
    fn recursive_single_frame_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let fusion = RecursiveFusion::new(&mut store, "rf", 4, &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::uniform(&[1, 4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone());
        let y = fusion.forward(&mut tape, xv, &[0]);
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn recursive_fusion_depends_on_order() {
        let mut store = ParamStore::<f64>::new();
        let fusion = RecursiveFusion::new(&mut store, "rf", 4, &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::uniform(&[4, 4, 3, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let run = |order: &[usize]| {
            let mut tape = Tape::new(&store);
            let xv = tape.input(x.clone());
            let y = fusion.forward(&mut tape, xv, order);
            tape.value(y).clone()
        };
        assert_ne!(run(&[0, 1, 2, 3]), run(&[1, 0, 2, 3]));
    }

    fn permute(series: &FeatureSeries<f64>, perm: &[usize]) -> FeatureSeries<f64> {
        let (_, c, h, w) = series.features.dims4();
        let plane = c * h * w;
        let src = series.features.data();
        let data = perm.iter().flat_map(|&k| src[k * plane..(k + 1) * plane].to_vec()).collect();
        FeatureSeries::new(
            Tensor::from_vec(series.features.shape(), data),
            Some(series.encoding.as_ref().unwrap().select(perm)),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn attention_is_permutation_invariant(seed in 0u64..10_000, t in 1usize..7) {
            let (store, ltae) = build::<f64>(8, 4, seed);
            let series = random_series::<f64>(t, 8, 3, 3, 4, seed + 1);
            let mut perm: Vec<usize> = (0..t).collect();
            perm.rotate_left(seed as usize % t);
            perm.reverse();
            let (a, wa) = ltae2d_fuse(&series, &ltae, &store).unwrap();
            let (b, wb) = ltae2d_fuse(&permute(&series, &perm), &ltae, &store).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-3));
            }
            for (new_k, &old_k) in perm.iter().enumerate() {
                for hd in 0..4 {
                    prop_assert!((wa.weight(hd, old_k, 1, 2) - wb.weight(hd, new_k, 1, 2)).abs() < 1e-6);
                }
            }
        }
    }
}
