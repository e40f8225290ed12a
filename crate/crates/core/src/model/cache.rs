use crate::error::{LabError, Result};

/// Keys, values and position ids cached for one decoder block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerKv {
    pub(crate) keys: Vec<f64>,
    pub(crate) values: Vec<f64>,
    pub(crate) positions: Vec<usize>,
}

impl LayerKv {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub(crate) fn push_rows(&mut self, keys: &[f64], values: &[f64], positions: &[usize]) {
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        self.positions.extend_from_slice(positions);
    }

    pub(crate) fn clear(&mut self) {
        self.keys.clear();
        self.values.clear();
        self.positions.clear();
    }
}

/// Per-block KV cache. Under truncation, blocks past the cut hold only the
/// surviving (text) positions, so per-layer lengths can differ.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub(crate) layers: Vec<LayerKv>,
    pub(crate) next_position: usize,
    pub(crate) max_seq: usize,
}

impl KvCache {
    pub(crate) fn new(layers: usize, max_seq: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); layers],
            next_position: 0,
            max_seq,
        }
    }

    /// Number of positions consumed so far (prompt plus decoded tokens).
    pub fn len(&self) -> usize {
        self.next_position
    }

    pub fn is_empty(&self) -> bool {
        self.next_position == 0
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn layer(&self, block: usize) -> &LayerKv {
        &self.layers[block]
    }

    /// Per-block cache lengths, block 1 first.
    pub fn layer_lengths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKv::len).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (b, l) in self.layers.iter().enumerate() {
            if l.positions.windows(2).any(|w| w[0] >= w[1]) {
                return Err(LabError::Protocol(format!(
                    "cache positions of block {} are not strictly increasing",
                    b + 1
                )));
            }
            if l.positions.last().is_some_and(|&p| p >= self.next_position) {
                return Err(LabError::Protocol(format!(
                    "cache block {} holds a position beyond the consumed length",
                    b + 1
                )));
            }
        }
        Ok(())
    }
}
