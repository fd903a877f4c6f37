//! Straightforward reference implementations used as test oracles.
#![allow(dead_code)]

use dps_core::backbone::{BackboneSpec, Layer, WeightContainer};
use dps_core::image::Image;
use dps_core::metrics::Norm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Channel-major `[c][y][x]` volume in f64.
#[derive(Debug, Clone)]
pub struct Vol {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Vol {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

/// Direct zero-padded cross-correlation; `weights` laid out `[o][i][ky][kx]`.
pub fn naive_conv(
    input: &Vol,
    weights: &[f32],
    bias: &[f32],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vol {
    let oh = (input.h + 2 * pad - k) / stride + 1;
    let ow = (input.w + 2 * pad - k) / stride + 1;
    let mut v = Vec::with_capacity(out_c * oh * ow);
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = f64::from(bias[o]);
                for i in 0..input.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let x = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || x < 0 || y >= input.h as isize || x >= input.w as isize {
                                continue;
                            }
                            let wv = weights[((o * input.c + i) * k + ky) * k + kx];
                            acc += f64::from(wv) * input.at(i, y as usize, x as usize);
                        }
                    }
                }
                v.push(acc);
            }
        }
    }
    Vol {
        c: out_c,
        h: oh,
        w: ow,
        v,
    }
}

/// Max pooling; with `ceil`, a trailing partial window is kept when it
/// starts inside the input.
pub fn naive_pool(input: &Vol, k: usize, stride: usize, ceil: bool) -> Vol {
    let count = |n: usize| {
        let full = (0..).take_while(|&i| i * stride + k <= n).count();
        let uncovered = (full - 1) * stride + k < n;
        if ceil && uncovered && full * stride < n {
            full + 1
        } else {
            full
        }
    };
    let (oh, ow) = (count(input.h), count(input.w));
    let mut v = Vec::new();
    for c in 0..input.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for y in oy * stride..(oy * stride + k).min(input.h) {
                    for x in ox * stride..(ox * stride + k).min(input.w) {
                        m = m.max(input.at(c, y, x));
                    }
                }
                v.push(m);
            }
        }
    }
    Vol {
        c: input.c,
        h: oh,
        w: ow,
        v,
    }
}

pub fn naive_relu(input: &Vol) -> Vol {
    Vol {
        v: input.v.iter().map(|&x| x.max(0.0)).collect(),
        ..input.clone()
    }
}

/// Layer-by-layer forward pass over the architecture description, keeping
/// every intermediate result.
pub fn naive_forward(spec: &BackboneSpec, weights: &WeightContainer, image: &Image) -> Vec<Vol> {
    let (h, w) = (image.height(), image.width());
    let mut input = Vol {
        c: 3,
        h,
        w,
        v: vec![0.0; 3 * h * w],
    };
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = f64::from(image.get(x, y)[c]);
                input.v[(c * h + y) * w + x] =
                    (2.0 * v - 1.0 - f64::from(weights.shift[c])) / f64::from(weights.scale[c]);
            }
        }
    }
    let mut outs: Vec<Vol> = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let src = |j: Option<usize>| -> &Vol {
            match j {
                None => &input,
                Some(j) => &outs[j],
            }
        };
        let prev = if i == 0 { None } else { Some(i - 1) };
        let out = match layer {
            Layer::Conv(c) => {
                let from = c.from.map(Some).unwrap_or(prev);
                let wr = weights.record(&c.weight_record()).unwrap();
                let br = weights.record(&c.bias_record()).unwrap();
                naive_conv(
                    src(from),
                    &wr.values,
                    &br.values,
                    c.out_channels,
                    c.kernel,
                    c.stride,
                    c.padding,
                )
            }
            Layer::Relu => naive_relu(src(prev)),
            Layer::MaxPool {
                kernel,
                stride,
                rounding,
            } => naive_pool(
                src(prev),
                *kernel,
                *stride,
                *rounding == dps_core::tensor::PoolRounding::Ceil,
            ),
            Layer::Concat { inputs } => {
                let parts: Vec<&Vol> = inputs.iter().map(|&j| &outs[j]).collect();
                Vol {
                    c: parts.iter().map(|p| p.c).sum(),
                    h: parts[0].h,
                    w: parts[0].w,
                    v: parts.iter().flat_map(|p| p.v.iter().copied()).collect(),
                }
            }
        };
        outs.push(out);
    }
    outs
}

pub fn term(d: f64, norm: Norm) -> f64 {
    match norm {
        Norm::L1 => d.abs(),
        Norm::L2 => d * d,
    }
}

/// Minimum over all pairings of `a` with permutations of `b` of the mean
/// norm term, by exhaustive search (Heap's algorithm).
pub fn brute_force_pairing(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    let n = a.len();
    let mut p: Vec<usize> = (0..n).collect();
    let cost = |p: &[usize]| (0..n).map(|i| term(a[i] - b[p[i]], norm)).sum::<f64>() / n as f64;
    let mut best = cost(&p);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            best = best.min(cost(&p));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Average precision by definition: for each relevant item, precision at
/// its rank, where ranks come from a stable ascending sort.
pub fn brute_force_ap(distances: &[f64], relevant: &[bool]) -> f64 {
    let n = distances.len();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..n {
        if !relevant[i] {
            continue;
        }
        count += 1;
        // items ranked at or above i: smaller distance, or equal with lower index
        let ahead: Vec<usize> = (0..n)
            .filter(|&j| distances[j] < distances[i] || (distances[j] == distances[i] && j <= i))
            .collect();
        let hits = ahead.iter().filter(|&&j| relevant[j]).count();
        total += hits as f64 / ahead.len() as f64;
    }
    total / count as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}
