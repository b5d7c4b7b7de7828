//! Separable bilinear resampling on channels-last grids (half-pixel centres,
//! edge-clamped), with its adjoint for backpropagation.

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let ratio = input as f64 / output as f64;
    let max = (input - 1) as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            Tap { i0, i1, w1: src - i0 as f64 }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Resampler {
    input: (usize, usize),
    output: (usize, usize),
    ys: Vec<Tap>,
    xs: Vec<Tap>,
}

impl Resampler {
    /// Shapes are (height, width); both must be non-zero.
    pub fn new(input: (usize, usize), output: (usize, usize)) -> Self {
        assert!(input.0 > 0 && input.1 > 0 && output.0 > 0 && output.1 > 0);
        Self {
            input,
            output,
            ys: taps(input.0, output.0),
            xs: taps(input.1, output.1),
        }
    }

    pub fn forward(&self, data: &[f64], channels: usize) -> Vec<f64> {
        let (ih, iw) = self.input;
        let (oh, ow) = self.output;
        debug_assert_eq!(data.len(), ih * iw * channels);
        // horizontal pass: ih x ow
        let mut tmp = vec![0.0; ih * ow * channels];
        for y in 0..ih {
            let row = &data[y * iw * channels..(y + 1) * iw * channels];
            for (x, t) in self.xs.iter().enumerate() {
                let out = &mut tmp[(y * ow + x) * channels..(y * ow + x + 1) * channels];
                let a = &row[t.i0 * channels..(t.i0 + 1) * channels];
                let b = &row[t.i1 * channels..(t.i1 + 1) * channels];
                let w0 = 1.0 - t.w1;
                for c in 0..channels {
                    out[c] = w0 * a[c] + t.w1 * b[c];
                }
            }
        }
        let mut out = vec![0.0; oh * ow * channels];
        let stride = ow * channels;
        for (y, t) in self.ys.iter().enumerate() {
            let a = &tmp[t.i0 * stride..(t.i0 + 1) * stride];
            let b = &tmp[t.i1 * stride..(t.i1 + 1) * stride];
            let w0 = 1.0 - t.w1;
            for (o, (va, vb)) in out[y * stride..(y + 1) * stride].iter_mut().zip(a.iter().zip(b)) {
                *o = w0 * va + t.w1 * vb;
            }
        }
        out
    }

    /// Adjoint of [`Resampler::forward`]: maps an output-space gradient back
    /// to the input grid.
    pub fn backward(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let (ih, iw) = self.input;
        let (oh, ow) = self.output;
        debug_assert_eq!(grad.len(), oh * ow * channels);
        let stride = ow * channels;
        let mut tmp = vec![0.0; ih * stride];
        for (y, t) in self.ys.iter().enumerate() {
            let w0 = 1.0 - t.w1;
            let g = &grad[y * stride..(y + 1) * stride];
            for (k, gv) in g.iter().enumerate() {
                tmp[t.i0 * stride + k] += w0 * gv;
                tmp[t.i1 * stride + k] += t.w1 * gv;
            }
        }
        let mut out = vec![0.0; ih * iw * channels];
        for y in 0..ih {
            for (x, t) in self.xs.iter().enumerate() {
                let w0 = 1.0 - t.w1;
                let base = (y * ow + x) * channels;
                for c in 0..channels {
                    let gv = tmp[base + c];
                    out[(y * iw + t.i0) * channels + c] += w0 * gv;
                    out[(y * iw + t.i1) * channels + c] += t.w1 * gv;
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling of a single-channel grid.
    pub fn nearest<T: Copy>(&self, data: &[T]) -> Vec<T> {
        let (ih, iw) = self.input;
        let (oh, ow) = self.output;
        let pick = |o: usize, n_in: usize, n_out: usize| {
            (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        let xs: Vec<usize> = (0..ow).map(|x| pick(x, iw, ow)).collect();
        let mut out = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = pick(y, ih, oh);
            out.extend(xs.iter().map(|sx| data[sy * iw + sx]));
        }
        out
    }
}
