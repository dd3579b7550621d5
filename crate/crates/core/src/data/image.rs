use crate::error::{FdnnError, Result};
use crate::tensor::Tensor;

/// An RGB image stored as a 3×H×W tensor with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Tensor);

impl Image {
    /// Wraps a 3×H×W tensor, clamping values into [0, 1].
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Image(t.map(|v| v.clamp(0.0, 1.0)))),
            s => Err(FdnnError::shape(format!("image must be 3×H×W, got {s:?}"))),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let plane = height * width;
        let t = Tensor::from_fn(&[3, height, width], |i| {
            f(i / plane, (i % plane) / width, i % width).clamp(0.0, 1.0)
        });
        Image(t)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Rec. 601 luma of one pixel.
    pub fn luma(&self, y: usize, x: usize) -> f64 {
        let [r, g, b] = self.pixel(y, x);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn luma_plane(&self) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        (0..h * w).map(|i| self.luma(i / w, i % w)).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mirror left to right.
    pub fn flip_horizontal(&self) -> Image {
        let w = self.width();
        Image::from_fn(self.height(), w, |c, y, x| self.get(c, y, w - 1 - x))
    }
}

/// Stacks equally sized images into an N×3×H×W batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = None;
    for img in images {
        let dims = (img.height(), img.width());
        if *hw.get_or_insert(dims) != dims {
            return Err(FdnnError::shape(format!(
                "cannot batch a {}x{} image with {}x{} images",
                dims.0,
                dims.1,
                hw.unwrap().0,
                hw.unwrap().1
            )));
        }
        data.extend_from_slice(img.tensor().data());
        n += 1;
    }
    let (h, w) = hw.ok_or_else(|| FdnnError::domain("cannot batch zero images"))?;
    Tensor::new(vec![n, 3, h, w], data)
}

/// Splits an N×3×H×W batch back into images.
pub fn unstack_images(batch: &Tensor) -> Result<Vec<Image>> {
    match batch.shape()[..] {
        [n, 3, h, w] => (0..n)
            .map(|i| {
                let chunk = batch.data()[i * 3 * h * w..(i + 1) * 3 * h * w].to_vec();
                Image::new(Tensor::new(vec![3, h, w], chunk)?)
            })
            .collect(),
        _ => Err(FdnnError::shape(format!(
            "expected an N×3×H×W batch, got {:?}",
            batch.shape()
        ))),
    }
}
