//! Enumeration of nuisance latent-state configurations.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TicaError};

/// Default cap on the number of configurations.
pub const DEFAULT_SPACE_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    /// Every combination of component labels.
    Full,
    /// Configurations with at most one source in its activation (last)
    /// component.
    Subspace,
}

/// Configurations `z ∈ {0..m−1}^q_prime` stored flat in lexicographic order.
/// Label `m − 1` is the activation component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentSpace {
    pub q_prime: usize,
    pub m: usize,
    pub kind: SpaceKind,
    labels: Vec<u8>,
}

impl LatentSpace {
    pub fn len(&self) -> usize {
        if self.q_prime == 0 {
            1
        } else {
            self.labels.len() / self.q_prime
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn config(&self, i: usize) -> &[u8] {
        &self.labels[i * self.q_prime..(i + 1) * self.q_prime]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.len()).map(move |i| self.config(i))
    }
}

/// A space holding one configuration.
pub(crate) fn single(z: &[u8], m: usize) -> LatentSpace {
    LatentSpace {
        q_prime: z.len(),
        m,
        kind: SpaceKind::Full,
        labels: z.to_vec(),
    }
}

/// Number of configurations for the given shape.
pub fn space_size(q_prime: usize, m: usize, kind: SpaceKind) -> u128 {
    let q = q_prime as u32;
    let m = m as u128;
    match kind {
        SpaceKind::Full => m.checked_pow(q).unwrap_or(u128::MAX),
        SpaceKind::Subspace if q_prime == 0 => 1,
        SpaceKind::Subspace => (m - 1)
            .checked_pow(q - 1)
            .and_then(|p| p.checked_mul(q_prime as u128 + m - 1))
            .unwrap_or(u128::MAX),
    }
}

pub fn enumerate_space(q_prime: usize, m: usize, kind: SpaceKind) -> Result<LatentSpace> {
    enumerate_space_capped(q_prime, m, kind, DEFAULT_SPACE_CAP)
}

pub fn enumerate_space_capped(q_prime: usize, m: usize, kind: SpaceKind, cap: u64) -> Result<LatentSpace> {
    if m < 2 || m > u8::MAX as usize {
        return Err(TicaError::DegenerateInput(format!(
            "mixtures need between 2 and 255 components, got {m}"
        )));
    }
    let count = space_size(q_prime, m, kind);
    if count > cap as u128 {
        return Err(TicaError::SpaceTooLarge { count, cap });
    }
    let mut labels = Vec::with_capacity(count as usize * q_prime);
    if q_prime > 0 {
        let mut current = vec![0u8; q_prime];
        fill(&mut labels, &mut current, 0, m as u8, kind == SpaceKind::Subspace, false);
    }
    debug_assert_eq!(labels.len() as u128, count * q_prime as u128);
    Ok(LatentSpace {
        q_prime,
        m,
        kind,
        labels,
    })
}

fn fill(out: &mut Vec<u8>, current: &mut [u8], pos: usize, m: u8, restricted: bool, active: bool) {
    if pos == current.len() {
        out.extend_from_slice(current);
        return;
    }
    for label in 0..m {
        let activation = label == m - 1;
        if restricted && activation && active {
            continue;
        }
        current[pos] = label;
        fill(out, current, pos + 1, m, restricted, active || activation);
    }
}
