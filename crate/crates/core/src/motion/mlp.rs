//! Two-hidden-layer perceptron with SiLU activations over a flat parameter
//! slice: `W1 b1 W2 b2 W3 b3`, weights row-major `[out][in]`.

use rand::Rng;

use crate::math::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

impl MlpShape {
    fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.input, self.hidden, self.output);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        Offsets { w1, b1, w2, b2, w3, b3, end: b3 + o }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().end
    }

    /// Range of the output layer (weights and bias) inside the slice.
    pub fn output_layer(&self) -> std::ops::Range<usize> {
        let o = self.offsets();
        o.w3..o.end
    }

    /// Glorot-uniform hidden layers, zero biases and a zero output layer.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let o = self.offsets();
        let mut p = vec![0.0; o.end];
        let a1 = (6.0 / (self.input + self.hidden) as f64).sqrt();
        for v in &mut p[o.w1..o.b1] {
            *v = rng.gen_range(-a1..a1);
        }
        let a2 = (6.0 / (2 * self.hidden) as f64).sqrt();
        for v in &mut p[o.w2..o.b2] {
            *v = rng.gen_range(-a2..a2);
        }
        p
    }
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Activations kept from a forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    input: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n_in = x.len();
    for (r, bias) in b.iter().enumerate() {
        let row = &w[r * n_in..(r + 1) * n_in];
        out.push(bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

pub fn forward(shape: &MlpShape, p: &[f64], input: &[f64], cache: &mut MlpCache, out: &mut [f64]) {
    let o = shape.offsets();
    cache.input.clear();
    cache.input.extend_from_slice(input);
    affine(&p[o.w1..o.b1], &p[o.b1..o.w2], input, &mut cache.z1);
    cache.h1.clear();
    cache.h1.extend(cache.z1.iter().map(|z| silu(*z)));
    affine(&p[o.w2..o.b2], &p[o.b2..o.w3], &cache.h1, &mut cache.z2);
    cache.h2.clear();
    cache.h2.extend(cache.z2.iter().map(|z| silu(*z)));
    let mut y = Vec::with_capacity(shape.output);
    affine(&p[o.w3..o.b3], &p[o.b3..o.end], &cache.h2, &mut y);
    out.copy_from_slice(&y);
}

/// Accumulates parameter gradients into `grad` (same layout as `p`) and
/// writes the input gradient into `grad_input`.
pub fn backward(shape: &MlpShape, p: &[f64], cache: &MlpCache, grad_out: &[f64], grad: &mut [f64], grad_input: &mut [f64]) {
    let o = shape.offsets();
    let (ni, nh) = (shape.input, shape.hidden);

    let mut g_h2 = vec![0.0; nh];
    for (r, &gy) in grad_out.iter().enumerate() {
        if gy == 0.0 {
            continue;
        }
        grad[o.b3 + r] += gy;
        for c in 0..nh {
            grad[o.w3 + r * nh + c] += gy * cache.h2[c];
            g_h2[c] += gy * p[o.w3 + r * nh + c];
        }
    }
    let g_z2: Vec<f64> = g_h2.iter().zip(&cache.z2).map(|(g, z)| g * silu_prime(*z)).collect();
    let mut g_h1 = vec![0.0; nh];
    for (r, &gz) in g_z2.iter().enumerate() {
        grad[o.b2 + r] += gz;
        let row = o.w2 + r * nh;
        for c in 0..nh {
            grad[row + c] += gz * cache.h1[c];
            g_h1[c] += gz * p[row + c];
        }
    }
    grad_input.fill(0.0);
    for r in 0..nh {
        let gz = g_h1[r] * silu_prime(cache.z1[r]);
        grad[o.b1 + r] += gz;
        let row = o.w1 + r * ni;
        for c in 0..ni {
            grad[row + c] += gz * cache.input[c];
            grad_input[c] += gz * p[row + c];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero() {
        let shape = MlpShape { input: 5, hidden: 8, output: 3 };
        let p = shape.init(&mut ChaCha8Rng::seed_from_u64(0));
        let mut out = [1.0; 3];
        forward(&shape, &p, &[0.3, -0.1, 0.9, 0.0, 2.0], &mut MlpCache::default(), &mut out);
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = MlpShape { input: 4, hidden: 6, output: 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = shape.init(&mut rng);
        for v in &mut p[shape.output_layer()] {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = [0.2, -0.7, 0.4, 1.1];
        let gy = [0.3, -1.0, 0.6];
        let loss = |p: &[f64], x: &[f64]| {
            let mut out = [0.0; 3];
            forward(&shape, p, x, &mut MlpCache::default(), &mut out);
            out.iter().zip(&gy).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut cache = MlpCache::default();
        let mut out = [0.0; 3];
        forward(&shape, &p, &x, &mut cache, &mut out);
        let mut grad = vec![0.0; p.len()];
        let mut gx = vec![0.0; 4];
        backward(&shape, &p, &cache, &gy, &mut grad, &mut gx);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut a = p.clone();
            a[i] += h;
            let mut b = p.clone();
            b[i] -= h;
            let fd = (loss(&a, &x) - loss(&b, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} {}", grad[i]);
        }
        for i in 0..4 {
            let mut a = x;
            a[i] += h;
            let mut b = x;
            b[i] -= h;
            let fd = (loss(&p, &a) - loss(&p, &b)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }
}
