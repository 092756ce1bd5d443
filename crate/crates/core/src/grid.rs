use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Row-major flattened `height × width` token map, `tokens` is `N × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if tokens.shape().len() != 2 || tokens.rows() != n || n == 0 {
            return Err(Error::Grid {
                tokens: tokens.rows(),
                height,
                width,
            });
        }
        Ok(Self { tokens, height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Same grid geometry with new token features.
    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.height, self.width)
    }

    /// `H × W × D` view of the tokens.
    pub fn to_image(&self) -> Result<Tensor> {
        self.tokens.reshape(vec![self.height, self.width, self.dim()])
    }

    /// Applies a permutation to the token order; `perm[j]` is the source row of row `j`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        Self {
            tokens: self.tokens.gather_rows(perm),
            height: self.height,
            width: self.width,
        }
    }

    pub fn reversed(&self) -> Self {
        let perm: Vec<usize> = (0..self.len()).rev().collect();
        self.permute(&perm)
    }
}
