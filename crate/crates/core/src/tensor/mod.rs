//! Dense row-major tensors and the typed views the pipeline passes around
//! (frame stacks, label maps, flow fields), plus their on-disk formats.

mod ppm;
mod qtns;

pub use ppm::{emit_image, label_color, ImageSource};
pub use qtns::{read_tensor, write_tensor, MAGIC, VERSION};

use crate::error::{Error, Result};

/// Maximum supported rank (B×T×C×H×W).
pub const MAX_RANK: usize = 5;

/// Reserved label id excluded from masks, losses and metrics.
pub const IGNORE: u16 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    U8,
    U16,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            2 => Some(DType::U16),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
        }
    }
}

/// Immutable dense tensor, outermost dimension first.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::shape(format!(
            "rank {} outside 1..={MAX_RANK}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} needs {n} elements, got {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::U8(data))
    }

    pub fn from_u16(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::new(shape, TensorData::U16(data))
    }

    pub fn zeros_f32(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_f32(shape, vec![0.0; n])
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

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::shape(format!("expected F32, found {:?}", other.dtype()))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::shape(format!("expected U8, found {:?}", other.dtype()))),
        }
    }

    pub fn as_u16(&self) -> Result<&[u16]> {
        match &self.data {
            TensorData::U16(v) => Ok(v),
            other => Err(Error::shape(format!("expected U16, found {:?}", other.dtype()))),
        }
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Slab `index` along the outermost dimension.
    pub fn outer(&self, index: usize) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::shape("outer() needs rank >= 2"));
        }
        if index >= self.shape[0] {
            return Err(Error::shape(format!(
                "index {index} out of range for outer dim {}",
                self.shape[0]
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let range = index * inner..(index + 1) * inner;
        let data = match &self.data {
            TensorData::F32(v) => TensorData::F32(v[range].to_vec()),
            TensorData::U8(v) => TensorData::U8(v[range].to_vec()),
            TensorData::U16(v) => TensorData::U16(v[range].to_vec()),
        };
        Tensor::new(self.shape[1..].to_vec(), data)
    }

    /// Stacks equally shaped, equally typed tensors along a new outer dimension.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        if parts
            .iter()
            .any(|p| p.shape != first.shape || p.dtype() != first.dtype())
        {
            return Err(Error::shape("stack operands differ in shape or dtype"));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let data = match first.dtype() {
            DType::F32 => TensorData::F32(
                parts
                    .iter()
                    .flat_map(|p| p.as_f32().unwrap().iter().copied())
                    .collect(),
            ),
            DType::U8 => TensorData::U8(
                parts
                    .iter()
                    .flat_map(|p| p.as_u8().unwrap().iter().copied())
                    .collect(),
            ),
            DType::U16 => TensorData::U16(
                parts
                    .iter()
                    .flat_map(|p| p.as_u16().unwrap().iter().copied())
                    .collect(),
            ),
        };
        Tensor::new(shape, data)
    }
}

/// Per-pixel category ids with a reserved [`IGNORE`] value.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    values: Tensor,
    num_categories: usize,
}

impl LabelMap {
    pub fn new(values: Tensor, num_categories: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape(format!(
                "label map must be H×W, got {:?}",
                values.shape()
            )));
        }
        if num_categories < 2 || num_categories > IGNORE as usize {
            return Err(Error::Category(format!(
                "num_categories {num_categories} outside 2..={}",
                IGNORE
            )));
        }
        if let Some(bad) = values
            .as_u16()?
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_categories)
        {
            return Err(Error::Category(format!(
                "label {bad} >= num_categories {num_categories}"
            )));
        }
        Ok(Self {
            values,
            num_categories,
        })
    }

    pub fn from_vec(h: usize, w: usize, values: Vec<u16>, num_categories: usize) -> Result<Self> {
        Self::new(Tensor::from_u16(vec![h, w], values)?, num_categories)
    }

    pub fn filled(h: usize, w: usize, value: u16, num_categories: usize) -> Result<Self> {
        Self::from_vec(h, w, vec![value; h * w], num_categories)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn values(&self) -> &[u16] {
        self.values.as_u16().expect("label map is U16")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn ignore_count(&self) -> usize {
        self.values().iter().filter(|&&v| v == IGNORE).count()
    }
}

/// Backward flow: output pixel (y, x) samples its source at (x + u, y + v).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    values: Tensor,
}

impl FlowField {
    pub fn new(values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || shape[2] != 2 {
            return Err(Error::shape(format!(
                "flow must be H×W×2, got {shape:?}"
            )));
        }
        if values.as_f32()?.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("flow contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn from_vec(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::from_f32(vec![h, w, 2], values)?)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::from_vec(h, w, vec![0.0; h * w * 2]).expect("valid zero flow")
    }

    /// Same displacement `(u, v)` at every pixel.
    pub fn constant(h: usize, w: usize, u: f32, v: f32) -> Result<Self> {
        let data = (0..h * w).flat_map(|_| [u, v]).collect();
        Self::from_vec(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &[f32] {
        self.values.as_f32().expect("flow is F32")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }
}

/// Stack of T ∈ {1, 2} frames, T×C×H×W, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    frames: Tensor,
}

impl FrameStack {
    pub fn new(frames: Tensor) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "frame stack must be T×C×H×W, got {shape:?}"
            )));
        }
        if !(1..=2).contains(&shape[0]) {
            return Err(Error::shape(format!("T must be 1 or 2, got {}", shape[0])));
        }
        frames.as_f32()?;
        Ok(Self { frames })
    }

    pub fn from_frames(frames: &[&Tensor]) -> Result<Self> {
        Self::new(Tensor::stack(frames)?)
    }

    pub fn from_vec(t: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::from_f32(vec![t, c, h, w], data)?)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn data(&self) -> &[f32] {
        self.frames.as_f32().expect("frame stack is F32")
    }

    /// Values of frame `i` as a flat C×H×W slice.
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.channels() * self.height() * self.width();
        &self.data()[i * n..(i + 1) * n]
    }

    /// The last (current) frame.
    pub fn current(&self) -> &[f32] {
        self.frame(self.len() - 1)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    pub fn frame_tensor(&self, i: usize) -> Tensor {
        self.frames.outer(i).expect("frame index in range")
    }
}
