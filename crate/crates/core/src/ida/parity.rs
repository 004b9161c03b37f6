use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parity {
    pub d_extra: usize,
    /// Parameters added by `M` new slots (keys and values).
    pub memory_added: usize,
    /// Parameters added by widening the hidden state by `d_extra`.
    pub hidden_added: usize,
}

/// Largest hidden widening whose added parameter count does not exceed
/// that of adding `m_slots` memory slots.
pub fn param_parity(config: &ModelConfig, m_slots: usize) -> Parity {
    let memory_added = 2 * m_slots * config.hidden_dim;
    let base = config.param_count();
    let added = |extra: usize| {
        let mut c = config.clone();
        c.hidden_dim += extra;
        c.param_count() - base
    };
    let mut d_extra = 0;
    while added(d_extra + 1) <= memory_added {
        d_extra += 1;
    }
    Parity {
        d_extra,
        memory_added,
        hidden_added: added(d_extra),
    }
}
