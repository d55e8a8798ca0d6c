use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Linear RGB image, row-major, top row first.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[T; 3]>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [T::zero(); 3])
    }

    pub fn filled(width: u32, height: u32, rgb: [T; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![rgb; width as usize * height as usize],
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<[T; 3]>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Invalid(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [T; 3] {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [T; 3]) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = rgb;
    }

    pub fn same_shape(&self, o: &Image<T>) -> bool {
        self.width == o.width && self.height == o.height
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| p.map(crate::scalar::cast::<T, U>))
                .collect(),
        }
    }
}
