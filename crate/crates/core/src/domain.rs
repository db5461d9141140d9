//! Images, mattes, trimaps and the compositing model they obey.
//!
//! All colour and opacity values are `f64` in `[0, 1]`, stored planar
//! (`[C, H, W]`) so they convert to network tensors without reshuffling.

use std::ops::Deref;

use crate::border::reflect;
use crate::error::{LfpError, Result};
use crate::tensor::Tensor;

/// A planar `channels × height × width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(LfpError::dim("grid", "non-empty", format!("{channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(LfpError::dim(
                "grid",
                format!("{} values", channels * height * width),
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty grid");
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `h × w` window whose top-left corner sits at `(top, left)`; samples
    /// outside the grid are mirrored back in.
    pub fn crop_reflect(&self, top: isize, left: isize, h: usize, w: usize) -> Self {
        Self::from_fn(self.channels, h, w, |c, y, x| {
            let sy = reflect(top + y as isize, self.height);
            let sx = reflect(left + x as isize, self.width);
            self.get(c, sy, sx)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.channels, self.height, self.width, |c, y, x| {
            self.get(c, self.height - 1 - y, x)
        })
    }

    pub fn same_dims<U: Copy>(&self, other: &Grid<U>, context: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(LfpError::dim(
                context,
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }
}

impl Grid<f64> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone()).expect("grid shape")
    }
}

fn check_unit_range(data: &[f64], what: &str) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(LfpError::Range(format!("{what} value {v} outside [0, 1]")));
    }
    Ok(())
}

macro_rules! unit_grid {
    ($(#[$meta:meta])* $name:ident, $channels:expr, $what:expr) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Grid<f64>);

        impl $name {
            pub const CHANNELS: usize = $channels;

            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                Self::from_grid(Grid::new($channels, height, width, data)?)
            }

            pub fn from_grid(grid: Grid<f64>) -> Result<Self> {
                if grid.channels() != $channels {
                    return Err(LfpError::dim($what, $channels, grid.channels()));
                }
                check_unit_range(grid.data(), $what)?;
                Ok(Self(grid))
            }

            /// Builds from a generator; values are clamped into `[0, 1]`.
            pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
                Self(Grid::from_fn($channels, height, width, |c, y, x| f(c, y, x).clamp(0.0, 1.0)))
            }

            pub fn constant(height: usize, width: usize, value: f64) -> Self {
                Self::from_fn(height, width, |_, _, _| value)
            }

            /// Converts a `[C, H, W]` tensor, clamping into `[0, 1]`.
            pub fn from_tensor(t: &Tensor) -> Result<Self> {
                let (c, h, w) = t.dims3()?;
                if c != $channels {
                    return Err(LfpError::dim($what, $channels, c));
                }
                let data = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
                Ok(Self(Grid::new(c, h, w, data)?))
            }

            pub fn grid(&self) -> &Grid<f64> {
                &self.0
            }

            pub fn into_grid(self) -> Grid<f64> {
                self.0
            }

            pub fn crop_reflect(&self, top: isize, left: isize, h: usize, w: usize) -> Self {
                Self(self.0.crop_reflect(top, left, h, w))
            }

            pub fn flip_horizontal(&self) -> Self {
                Self(self.0.flip_horizontal())
            }

            pub fn flip_vertical(&self) -> Self {
                Self(self.0.flip_vertical())
            }
        }

        impl Deref for $name {
            type Target = Grid<f64>;
            fn deref(&self) -> &Grid<f64> {
                &self.0
            }
        }
    };
}

unit_grid!(
    /// An RGB image with values in `[0, 1]`.
    Image,
    3,
    "image"
);
unit_grid!(
    /// Per-pixel opacity of the foreground layer.
    AlphaMatte,
    1,
    "alpha"
);

/// Foreground or background colours; same layout and invariants as [`Image`].
pub type ColorMap = Image;

impl AlphaMatte {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.get(0, y, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Label {
    Fg,
    Bg,
    Unknown,
}

impl Label {
    /// The alphamatting.com greyscale code.
    pub fn code(self) -> u8 {
        match self {
            Label::Bg => 0,
            Label::Unknown => 128,
            Label::Fg => 255,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        match code {
            0 => Some(Label::Bg),
            128 => Some(Label::Unknown),
            255 => Some(Label::Fg),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trimap(Grid<Label>);

impl Trimap {
    pub fn new(height: usize, width: usize, labels: Vec<Label>) -> Result<Self> {
        Ok(Self(Grid::new(1, height, width, labels)?))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> Label) -> Self {
        Self(Grid::from_fn(1, height, width, |_, y, x| f(y, x)))
    }

    pub fn filled(height: usize, width: usize, label: Label) -> Self {
        Self::from_fn(height, width, |_, _| label)
    }

    pub fn at(&self, y: usize, x: usize) -> Label {
        self.0.get(0, y, x)
    }

    pub fn labels(&self) -> &[Label] {
        self.0.data()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels().iter().filter(|&&l| l == label).count()
    }

    pub fn grid(&self) -> &Grid<Label> {
        &self.0
    }

    pub fn crop_reflect(&self, top: isize, left: isize, h: usize, w: usize) -> Self {
        Self(self.0.crop_reflect(top, left, h, w))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self(self.0.flip_horizontal())
    }

    pub fn flip_vertical(&self) -> Self {
        Self(self.0.flip_vertical())
    }
}

impl Deref for Trimap {
    type Target = Grid<Label>;
    fn deref(&self) -> &Grid<Label> {
        &self.0
    }
}

/// A boolean pixel set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Grid<bool>);

impl Mask {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(1, height, width, |_, y, x| f(y, x)))
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.0.get(0, y, x)
    }

    pub fn values(&self) -> &[bool] {
        self.0.data()
    }

    pub fn count(&self) -> usize {
        self.values().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.values().iter().zip(other.values()).all(|(&a, &b)| !a || b)
    }

    /// `1.0` inside the mask, `0.0` outside, as a `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w) = self.0.dims();
        Tensor::new(vec![1, h, w], self.values().iter().map(|&b| b as u8 as f64).collect()).expect("mask shape")
    }
}

impl Deref for Mask {
    type Target = Grid<bool>;
    fn deref(&self) -> &Grid<bool> {
        &self.0
    }
}

/// `T^U`, `T^FU` and `T^BU`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub unknown: Mask,
    pub fg_or_unknown: Mask,
    pub bg_or_unknown: Mask,
}

/// One training or evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub trimap: Trimap,
    pub alpha_gt: AlphaMatte,
    pub fg_gt: ColorMap,
    pub bg_gt: ColorMap,
}

impl Sample {
    pub fn new(image: Image, trimap: Trimap, alpha_gt: AlphaMatte, fg_gt: ColorMap, bg_gt: ColorMap) -> Result<Self> {
        image.same_dims(trimap.grid(), "sample trimap")?;
        image.same_dims(alpha_gt.grid(), "sample alpha")?;
        image.same_dims(fg_gt.grid(), "sample foreground")?;
        image.same_dims(bg_gt.grid(), "sample background")?;
        Ok(Self {
            image,
            trimap,
            alpha_gt,
            fg_gt,
            bg_gt,
        })
    }

    pub fn side(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// `I = αF + (1 − α)B`, per channel.
pub fn composite(fg: &ColorMap, bg: &ColorMap, alpha: &AlphaMatte) -> Result<Image> {
    fg.same_dims(bg.grid(), "composite background")?;
    fg.same_dims(alpha.grid(), "composite alpha")?;
    Ok(Image::from_fn(fg.height(), fg.width(), |c, y, x| {
        let a = alpha.at(y, x);
        a * fg.get(c, y, x) + (1.0 - a) * bg.get(c, y, x)
    }))
}

/// One-hot `[FG, BG, U]` encoding as a `3 × H × W` feature map.
pub fn encode_trimap(t: &Trimap) -> Tensor {
    let (h, w) = t.dims();
    Tensor::from_fn3(3, h, w, |c, y, x| {
        let hot = match t.at(y, x) {
            Label::Fg => 0,
            Label::Bg => 1,
            Label::Unknown => 2,
        };
        (c == hot) as u8 as f64
    })
}

pub fn region_masks(t: &Trimap) -> RegionMasks {
    let (h, w) = t.dims();
    RegionMasks {
        unknown: Mask::from_fn(h, w, |y, x| t.at(y, x) == Label::Unknown),
        fg_or_unknown: Mask::from_fn(h, w, |y, x| t.at(y, x) != Label::Bg),
        bg_or_unknown: Mask::from_fn(h, w, |y, x| t.at(y, x) != Label::Fg),
    }
}

/// Forces known pixels to their trimap value; unknown pixels pass through.
pub fn clamp_by_trimap(alpha: &AlphaMatte, t: &Trimap) -> Result<AlphaMatte> {
    alpha.same_dims(t.grid(), "clamp_by_trimap")?;
    Ok(AlphaMatte::from_fn(alpha.height(), alpha.width(), |_, y, x| match t.at(y, x) {
        Label::Fg => 1.0,
        Label::Bg => 0.0,
        Label::Unknown => alpha.at(y, x),
    }))
}
