//! Query-counted black-box wrapper around a target classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::defenses::DefenseSpec;
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::tensor::Tensor;

/// Result of one black-box query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub probs: Vec<f64>,
    pub label: usize,
}

/// The only view of a target the black-box optimizer gets: probabilities
/// for an input, one query at a time, under a budget.
#[derive(Debug)]
pub struct BlackBoxTarget {
    model: ModelHandle,
    defense: Option<DefenseSpec>,
    rng: ChaCha8Rng,
    fixed_draw: Option<crate::defenses::ResizePadDraw>,
    query_count: u64,
    query_budget: u64,
}

impl BlackBoxTarget {
    pub fn new(model: &ModelHandle, defense: Option<DefenseSpec>, query_budget: u64) -> Result<Self> {
        if let Some(d) = &defense {
            d.validate()?;
        }
        let seed = match defense {
            Some(DefenseSpec::ResizePad { rng_seed, .. }) => rng_seed,
            _ => 0,
        };
        Ok(Self {
            model: model.to_black_box(),
            defense,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fixed_draw: None,
            query_count: 0,
            query_budget,
        })
    }

    /// Reseeds the defense randomness; used to give each sample its own stream.
    pub fn with_defense_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    pub fn query_budget(&self) -> u64 {
        self.query_budget
    }

    pub fn remaining(&self) -> u64 {
        self.query_budget - self.query_count
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.model.input_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn defense(&self) -> Option<&DefenseSpec> {
        self.defense.as_ref()
    }

    fn preprocess(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.defense {
            None => Ok(x.clone()),
            Some(DefenseSpec::ResizePad {
                extra,
                fixed_per_sample: true,
                ..
            }) => {
                let (_, h, w) = x.chw()?;
                let rng = &mut self.rng;
                let draw = *self
                    .fixed_draw
                    .get_or_insert_with(|| crate::defenses::ResizePadDraw::sample(h, w, extra, rng));
                draw.apply(x, extra)
            }
            Some(ref d) => d.apply(x, &mut self.rng),
        }
    }

    /// One forward pass of the (defended) target.
    pub fn query(&mut self, x: &Tensor) -> Result<QueryResult> {
        if self.query_count >= self.query_budget {
            return Err(Error::BudgetExhausted {
                queries: self.query_count,
            });
        }
        let input = self.preprocess(x)?;
        let out = self.model.forward(&input)?;
        self.query_count += 1;
        let label = out.label();
        Ok(QueryResult {
            probs: out.probs,
            label,
        })
    }
}
