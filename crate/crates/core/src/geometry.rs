//! Inner-tile / context-window bookkeeping.

use serde::{Deserialize, Serialize};

use crate::domain::{Image, Trimap};
use crate::error::{LfpError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgePad {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

impl EdgePad {
    pub fn is_zero(&self) -> bool {
        *self == EdgePad::default()
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

/// An inner `s×s` window and the `2s×2s` context window centred on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub image_width: usize,
    pub image_height: usize,
    /// Top-left corner of the inner window, `(x, y)`.
    pub inner_origin: (usize, usize),
    pub inner_side: usize,
    /// Pixels this tile owns when stitching without blending.
    pub write: Rect,
}

impl PatchGeometry {
    pub fn new(image_width: usize, image_height: usize, inner_origin: (usize, usize), inner_side: usize) -> Result<Self> {
        if inner_side == 0 || !inner_side.is_multiple_of(2) {
            return Err(LfpError::Geometry(format!("inner side {inner_side} must be positive and even")));
        }
        if inner_origin.0 >= image_width || inner_origin.1 >= image_height {
            return Err(LfpError::Geometry(format!(
                "inner origin {inner_origin:?} outside {image_width}x{image_height} image"
            )));
        }
        let write = Rect {
            x: inner_origin.0,
            y: inner_origin.1,
            width: inner_side.min(image_width - inner_origin.0),
            height: inner_side.min(image_height - inner_origin.1),
        };
        Ok(Self {
            image_width,
            image_height,
            inner_origin,
            inner_side,
            write,
        })
    }

    pub fn context_side(&self) -> usize {
        2 * self.inner_side
    }

    /// May be negative when the context window leaves the image.
    pub fn context_origin(&self) -> (isize, isize) {
        let half = (self.inner_side / 2) as isize;
        (self.inner_origin.0 as isize - half, self.inner_origin.1 as isize - half)
    }

    /// Offset of the inner window inside the context window (always `s/2`).
    pub fn inner_offset_in_context(&self) -> usize {
        self.inner_side / 2
    }

    /// Padding needed where the inner window exits the image.
    pub fn inner_pad(&self) -> EdgePad {
        pad_for(
            self.inner_origin.0 as isize,
            self.inner_origin.1 as isize,
            self.inner_side,
            self.image_width,
            self.image_height,
        )
    }

    /// Padding needed where the context window exits the image.
    pub fn context_pad(&self) -> EdgePad {
        let (x, y) = self.context_origin();
        pad_for(x, y, self.context_side(), self.image_width, self.image_height)
    }

    /// The inner window as an image rectangle, clipped to the image.
    pub fn inner_rect(&self) -> Rect {
        Rect {
            x: self.inner_origin.0,
            y: self.inner_origin.1,
            width: self.inner_side.min(self.image_width - self.inner_origin.0),
            height: self.inner_side.min(self.image_height - self.inner_origin.1),
        }
    }
}

fn pad_for(x: isize, y: isize, side: usize, width: usize, height: usize) -> EdgePad {
    let s = side as isize;
    EdgePad {
        left: (-x).max(0) as usize,
        top: (-y).max(0) as usize,
        right: (x + s - width as isize).max(0) as usize,
        bottom: (y + s - height as isize).max(0) as usize,
    }
}

/// Context image `I_c` and trimap `T_c` bound to an inner window.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPair {
    pub image: Image,
    pub trimap: Trimap,
    pub geometry: PatchGeometry,
}

impl ContextPair {
    pub fn new(image: Image, trimap: Trimap, geometry: PatchGeometry) -> Result<Self> {
        image.same_dims(trimap.grid(), "context trimap")?;
        let side = geometry.context_side();
        if image.dims() != (side, side) {
            return Err(LfpError::Geometry(format!(
                "context patch is {:?}, expected {side}x{side}",
                image.dims()
            )));
        }
        Ok(Self {
            image,
            trimap,
            geometry,
        })
    }

    pub fn side(&self) -> usize {
        self.image.height()
    }

    /// The central inner window of the context patch.
    pub fn inner(&self) -> (Image, Trimap) {
        let s = self.geometry.inner_side;
        let o = self.geometry.inner_offset_in_context() as isize;
        (self.image.crop_reflect(o, o, s, s), self.trimap.crop_reflect(o, o, s, s))
    }

    /// RGB followed by one-hot trimap: a `6 × 2s × 2s` tensor.
    pub fn to_input(&self) -> Tensor {
        network_input(&self.image, &self.trimap)
    }
}

/// RGB + one-hot trimap channels.
pub fn network_input(image: &Image, trimap: &Trimap) -> Tensor {
    let rgb = image.to_tensor();
    let hot = crate::domain::encode_trimap(trimap);
    let (h, w) = image.dims();
    let mut data = rgb.into_data();
    data.extend_from_slice(hot.data());
    Tensor::new(vec![6, h, w], data).expect("input shape")
}
