use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Trainable prompt embeddings prepended to the condition sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTokens {
    pub tokens: Tensor,
}

impl PromptTokens {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Every row starts as the mean embedding of the task description.
pub fn init_prompt_tokens(description: &[u32], embedding_table: &Tensor, num_tokens: usize) -> Result<PromptTokens> {
    ensure!(!description.is_empty(), "task description is empty");
    ensure!(num_tokens >= 1, "need at least one prompt token");
    let shape = embedding_table.shape();
    ensure!(shape.len() == 2, "embedding table must be a matrix");
    let (vocab, d) = (shape[0], shape[1]);
    let mut mean = vec![0.0f64; d];
    for &id in description {
        let id = id as usize;
        ensure!(id < vocab, "token id {id} outside vocabulary of {vocab}");
        for (m, v) in mean.iter_mut().zip(&embedding_table.data()[id * d..(id + 1) * d]) {
            *m += f64::from(*v);
        }
    }
    let n = description.len() as f64;
    let row: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
    let data = row.iter().copied().cycle().take(num_tokens * d).collect();
    Ok(PromptTokens {
        tokens: Tensor::new([num_tokens, d], data)?,
    })
}
