//! Synthetic grid-world and tabletop instruction-following data.

pub mod instruction;
pub mod lilc;
pub mod render;
pub mod scene;
pub mod stream;

use std::fmt;
use std::str::FromStr;

use lilac_autodiff::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LilacError, Result};
pub use instruction::{enumerate_instructions, Instruction};
pub use scene::{Scene, SceneTriple, Subproblem};
pub use stream::{build_stream, Split, StreamConfig, TaskData, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Dataset {
    /// Raster height and width.
    pub fn image_size(self) -> (usize, usize) {
        match self {
            Dataset::TwoD => (render::GRID_PX, render::GRID_PX),
            Dataset::ThreeD => (render::TABLE_PX, render::TABLE_PX),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::TwoD => "2d",
            Dataset::ThreeD => "3d",
        })
    }
}

impl FromStr for Dataset {
    type Err = LilacError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(Dataset::TwoD),
            "3d" => Ok(Dataset::ThreeD),
            _ => Err(LilacError::Config(format!("unknown dataset {s:?} (expected 2d or 3d)"))),
        }
    }
}

/// RGB image stored as planar bytes, `[3, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; 3 * height * width],
        }
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> u8 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let plane = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * plane + y * self.width + x] = v;
        }
    }

    pub(crate) fn put_clipped(&mut self, y: i32, x: i32, rgb: [u8; 3]) {
        if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
            self.put(y as usize, x as usize, rgb);
        }
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn write_scaled<T: Scalar>(&self, out: &mut [T]) {
        let s = T::one() / T::from_f64_lossy(255.0);
        for (o, &v) in out.iter_mut().zip(&self.data) {
            *o = T::from_f64_lossy(v as f64) * s;
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let mut data = vec![T::zero(); self.data.len()];
        self.write_scaled(&mut data);
        Tensor::new(vec![3, self.height, self.width], data).expect("raster dims are positive")
    }
}

/// One training or evaluation item: instruction, premise image and the two
/// candidate outcome images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u16>,
    pub premise: Raster,
    pub positive: Raster,
    pub negative: Raster,
    /// 0 for the initialisation split, otherwise the position in the stream.
    pub task_id: u16,
    pub instruction_id: u16,
}

/// An example together with the scenes it was rendered from.
#[derive(Clone, Debug)]
pub struct Generated {
    pub example: Example,
    pub scenes: SceneTriple,
}

pub fn generate_example(instr: &Instruction, rng: &mut ChaCha8Rng) -> Result<Generated> {
    let scenes = scene::sample_triple(instr, rng)?;
    let example = Example {
        tokens: instr.tokens(),
        premise: render::render(&scenes.premise),
        positive: render::render(&scenes.positive),
        negative: render::render(&scenes.negative),
        task_id: 0,
        instruction_id: instr.id(),
    };
    if example.positive == example.negative {
        return Err(LilacError::Invariant("positive and negative rasters coincide".into()));
    }
    Ok(Generated { example, scenes })
}
