use std::collections::HashMap;
use std::sync::Mutex;

use super::dataset::{load_sample, DatasetIndex, ImageSample};
use crate::error::Result;

/// Random-access supplier of training pairs.
pub trait PairSource: Sync {
    fn len(&self) -> usize;

    fn load(&self, i: usize) -> Result<ImageSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pairs held in memory.
pub struct InMemory(pub Vec<ImageSample>);

impl PairSource for InMemory {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, i: usize) -> Result<ImageSample> {
        Ok(self.0[i].clone())
    }
}

/// Pairs decoded from an index on demand, optionally kept after first use.
pub struct OnDisk {
    index: DatasetIndex,
    cache: Option<Mutex<HashMap<usize, ImageSample>>>,
}

impl OnDisk {
    pub fn new(index: DatasetIndex, cache: bool) -> Self {
        Self {
            index,
            cache: cache.then(Default::default),
        }
    }

    pub fn index(&self) -> &DatasetIndex {
        &self.index
    }
}

impl PairSource for OnDisk {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn load(&self, i: usize) -> Result<ImageSample> {
        let Some(cache) = &self.cache else {
            return load_sample(&self.index.pairs[i]);
        };
        if let Some(s) = cache.lock().expect("cache lock").get(&i) {
            return Ok(s.clone());
        }
        let s = load_sample(&self.index.pairs[i])?;
        cache.lock().expect("cache lock").insert(i, s.clone());
        Ok(s)
    }
}
