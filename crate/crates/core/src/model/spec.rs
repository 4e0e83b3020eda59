use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// 2x2, stride-2 pooling applied at the end of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    None,
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// `act(conv(x))`
    Plain,
    /// `h = act(conv(x)); h + act(conv'(h))`
    Residual,
    /// `concat(x, act(conv(x)))`; stride must be 1.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub kind: BlockKind,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
    pub pool: Pool,
}

impl ConvBlock {
    pub fn plain(filters: usize, activation: Activation, pool: Pool) -> Self {
        Self {
            kind: BlockKind::Plain,
            filters,
            kernel: 3,
            stride: 1,
            activation,
            pool,
        }
    }

    pub fn with_kind(mut self, kind: BlockKind) -> Self {
        self.kind = kind;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub global_avg_pool: bool,
    /// Hidden dense widths before the final `num_classes` layer.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl HeadSpec {
    pub fn gap_linear() -> Self {
        Self {
            global_avg_pool: true,
            hidden: Vec::new(),
            hidden_activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCnnSpec {
    pub name: String,
    /// `(C, H, W)`
    pub input_shape: [usize; 3],
    pub blocks: Vec<ConvBlock>,
    pub head: HeadSpec,
    pub num_classes: usize,
}

impl MicroCnnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config(format!("{}: at least one conv block", self.name)));
        }
        if self.num_classes < 1 || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("{}: empty input or output", self.name)));
        }
        for b in &self.blocks {
            if b.filters == 0 || b.kernel == 0 || b.kernel % 2 == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "{}: blocks need filters >= 1, odd kernel and stride >= 1",
                    self.name
                )));
            }
            if b.kind == BlockKind::Dense && b.stride != 1 {
                return Err(Error::Config(format!(
                    "{}: dense blocks require stride 1",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// CAM needs the head to be global-average-pool followed by one linear layer.
    pub fn cam_compatible(&self) -> bool {
        self.head.global_avg_pool && self.head.hidden.is_empty()
    }
}

/// Architecture description stored alongside weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    MicroCnn(MicroCnnSpec),
    /// Flatten followed by one dense layer.
    Linear {
        input_shape: [usize; 3],
        num_outputs: usize,
    },
}

impl ModelSpec {
    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            ModelSpec::MicroCnn(s) => s.input_shape,
            ModelSpec::Linear { input_shape, .. } => *input_shape,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::MicroCnn(s) => s.num_classes,
            ModelSpec::Linear { num_outputs, .. } => *num_outputs,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ModelSpec::MicroCnn(s) => &s.name,
            ModelSpec::Linear { .. } => "linear",
        }
    }

    /// First 8 bytes (little-endian) of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// The four reference micro architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Plain conv stack.
    A,
    /// Residual blocks.
    B,
    /// Dense concatenation blocks.
    C,
    /// VGG-like deep and narrow.
    D,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::A, Family::B, Family::C, Family::D];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Family::A),
            "B" => Ok(Family::B),
            "C" => Ok(Family::C),
            "D" => Ok(Family::D),
            other => Err(Error::Config(format!("unknown architecture family {other:?}"))),
        }
    }

    pub fn spec(self, input_shape: [usize; 3], num_classes: usize) -> MicroCnnSpec {
        use Activation::Relu;
        let blocks = match self {
            Family::A => vec![
                ConvBlock::plain(8, Relu, Pool::Max),
                ConvBlock::plain(16, Relu, Pool::None),
            ],
            Family::B => vec![
                ConvBlock::plain(8, Relu, Pool::Max),
                ConvBlock::plain(12, Relu, Pool::None).with_kind(BlockKind::Residual),
            ],
            Family::C => vec![
                ConvBlock::plain(8, Relu, Pool::Max),
                ConvBlock::plain(6, Relu, Pool::None).with_kind(BlockKind::Dense),
                ConvBlock::plain(6, Relu, Pool::None).with_kind(BlockKind::Dense),
            ],
            Family::D => vec![
                ConvBlock::plain(6, Relu, Pool::None),
                ConvBlock::plain(6, Relu, Pool::Max),
                ConvBlock::plain(10, Relu, Pool::None),
                ConvBlock::plain(10, Relu, Pool::None),
            ],
        };
        MicroCnnSpec {
            name: format!("{self:?}"),
            input_shape,
            blocks,
            head: HeadSpec::gap_linear(),
            num_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_valid_and_cam_compatible() {
        for f in Family::ALL {
            let s = f.spec([3, 16, 16], 4);
            s.validate().unwrap();
            assert!(s.cam_compatible());
        }
    }

    #[test]
    fn hash_distinguishes_architectures() {
        let a = ModelSpec::MicroCnn(Family::A.spec([3, 16, 16], 4));
        let b = ModelSpec::MicroCnn(Family::B.spec([3, 16, 16], 4));
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn rejects_empty_blocks() {
        let mut s = Family::A.spec([3, 8, 8], 2);
        s.blocks.clear();
        assert!(s.validate().is_err());
    }
}
