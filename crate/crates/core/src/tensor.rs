//! Dense `f32` tensors and the resampling primitives used by the steering
//! transforms.
//!
//! Storage is row-major: for a shape `[d0, d1, ..., dk]` the element at
//! index `[i0, i1, ..., ik]` lives at offset
//! `((i0 * d1 + i1) * d2 + i2) ... * dk + ik`.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(invalid(format!("tensor shape {shape:?} must have positive dimensions")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    /// Builds a 2-D tensor from a function of `(row, col)`.
    pub fn from_fn_2d(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Self::new(vec![h, w], data)
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), w], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Row-major offset of `index`, or `None` when out of bounds.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            off = off * d + i;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<f32> {
        self.offset(index).map(|o| self.data[o])
    }

    pub fn set(&mut self, index: &[usize], value: f32) -> Result<()> {
        let o = self
            .offset(index)
            .ok_or_else(|| invalid(format!("index {index:?} out of bounds for {:?}", self.shape)))?;
        self.data[o] = value;
        Ok(())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Height and width of a 2-D tensor.
    pub fn dims_2d(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[h, w] => Ok((h, w)),
            s => Err(invalid(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    /// `(channels, height, width)` of a 3-D tensor.
    pub fn dims_3d(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(invalid(format!("expected a 3-D tensor, got shape {s:?}"))),
        }
    }

    /// Copies channel `c` of a 3-D tensor out as a 2-D tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (ch, h, w) = self.dims_3d()?;
        if c >= ch {
            return Err(invalid(format!("channel {c} out of range ({ch})")));
        }
        let plane = h * w;
        Tensor::new(vec![h, w], self.data[c * plane..(c + 1) * plane].to_vec())
    }

    pub fn channel_slice(&self, c: usize) -> &[f32] {
        let plane: usize = self.shape[1..].iter().product();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_slice_mut(&mut self, c: usize) -> &mut [f32] {
        let plane: usize = self.shape[1..].iter().product();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Overwrites channel `c` of a 3-D tensor with a 2-D tensor of matching size.
    pub fn set_channel(&mut self, c: usize, plane: &Tensor) -> Result<()> {
        let (ch, h, w) = self.dims_3d()?;
        if c >= ch || plane.shape() != [h, w] {
            return Err(invalid(format!(
                "cannot write plane {:?} into channel {c} of {:?}",
                plane.shape(),
                self.shape
            )));
        }
        self.channel_slice_mut(c).copy_from_slice(plane.data());
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f32> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }
}

/// Index of the first maximal element; NaNs never win.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Source coordinate of output sample `i` when mapping `src` samples onto
/// `dst` samples with pixel centres aligned.
pub fn source_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

// Per-output taps: four (clamped source index, weight) pairs.
fn cubic_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 4]> {
    (0..dst)
        .map(|i| {
            let s = source_coord(i, src, dst);
            let base = s.floor();
            let frac = s - base;
            let base = base as i64;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let offset = k as i64 - 1;
                let idx = (base + offset).clamp(0, src as i64 - 1) as usize;
                *tap = (idx, cubic_weight(frac - offset as f64));
            }
            taps
        })
        .collect()
}

/// Bicubic resampling of a 2-D tensor with border clamping.
///
/// Values are not clamped, so outputs can overshoot the input range near
/// sharp edges.
pub fn bicubic_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = input.dims_2d()?;
    if h < 2 || w < 2 {
        return Err(invalid(format!("bicubic_resize needs at least 2x2 input, got {h}x{w}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid("bicubic_resize output size must be positive"));
    }
    let rows = cubic_taps(h, out_h);
    let cols = cubic_taps(w, out_w);
    let src = input.data();

    // Horizontal pass into f64 scratch, then vertical pass.
    let mut horiz = vec![0.0f64; h * out_w];
    for r in 0..h {
        for (c, taps) in cols.iter().enumerate() {
            horiz[r * out_w + c] =
                taps.iter().map(|&(idx, wt)| wt * src[r * w + idx] as f64).sum();
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for taps in &rows {
        for c in 0..out_w {
            let v: f64 = taps.iter().map(|&(idx, wt)| wt * horiz[idx * out_w + c]).sum();
            out.push(v as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Drops `margin` rows and columns from every side of a 2-D tensor.
pub fn crop_margin(input: &Tensor, margin: usize) -> Result<Tensor> {
    let (h, w) = input.dims_2d()?;
    if 2 * margin >= h.min(w) {
        return Err(invalid(format!("margin {margin} too large for {h}x{w}")));
    }
    let (nh, nw) = (h - 2 * margin, w - 2 * margin);
    let src = input.data();
    let mut out = Vec::with_capacity(nh * nw);
    for r in margin..h - margin {
        out.extend_from_slice(&src[r * w + margin..r * w + w - margin]);
    }
    Tensor::new(vec![nh, nw], out)
}
