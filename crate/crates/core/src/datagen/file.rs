use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpisodeMeta, EpisodeRecord, Normalizer};
use crate::container;
use crate::envs::EnvId;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeHeader {
    steps: usize,
    terminated: bool,
    truncated: bool,
    meta: EpisodeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    env_id: Option<EnvId>,
    state_dim: usize,
    action_dim: usize,
    delay_steps: usize,
    /// Start of each episode in the payload, in f32 units; one extra
    /// trailing entry holds the total length.
    offsets: Vec<usize>,
    episodes: Vec<EpisodeHeader>,
    normalizer: Normalizer,
}

/// Loaded dataset: episodes plus the normalizer fitted at collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub env_id: Option<EnvId>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub delay_steps: usize,
    pub episodes: Vec<EpisodeRecord>,
    pub normalizer: Normalizer,
    /// SHA-256 of the file bytes.
    pub digest: String,
}

impl DatasetFile {
    /// Warning text when the planner runs at a different delay than the
    /// collector did.
    pub fn delay_warning(&self, planner_delay: usize) -> Option<String> {
        (planner_delay != self.delay_steps)
            .then(|| format!("dataset was collected at delay {} but the planner uses delay {planner_delay}", self.delay_steps))
    }
}

fn episode_len(ep: &EpisodeRecord, sd: usize, ad: usize) -> usize {
    (ep.steps() + 1) * sd + ep.steps() * ad + ep.steps()
}

pub fn encode_dataset(episodes: &[EpisodeRecord], norm: &Normalizer) -> Result<Vec<u8>> {
    let state_dim = norm.state_dim();
    let action_dim = episodes.iter().find_map(|e| e.actions.first().map(Vec::len)).unwrap_or(0);
    let mut offsets = vec![0usize];
    let mut values = Vec::new();
    for ep in episodes {
        if ep.states.len() != ep.steps() + 1 || ep.rewards.len() != ep.steps() {
            return Err(Error::Format("episode extents are inconsistent".into()));
        }
        values.extend(ep.states.iter().flatten().copied());
        values.extend(ep.actions.iter().flatten().copied());
        values.extend(ep.rewards.iter().copied());
        offsets.push(values.len());
        if values.len() - offsets[offsets.len() - 2] != episode_len(ep, state_dim, action_dim) {
            return Err(Error::Format("episode row widths are inconsistent".into()));
        }
    }
    let header = Header {
        version: DATASET_VERSION,
        env_id: episodes.first().map(|e| e.meta.env_id),
        state_dim,
        action_dim,
        delay_steps: episodes.first().map(|e| e.meta.delay).unwrap_or(0),
        offsets,
        episodes: episodes
            .iter()
            .map(|e| EpisodeHeader { steps: e.steps(), terminated: e.terminated, truncated: e.truncated, meta: e.meta.clone() })
            .collect(),
        normalizer: norm.clone(),
    };
    container::encode(&serde_json::to_value(&header)?, &container::f32_payload(values))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DatasetFile> {
    let (header, payload) = container::decode(bytes)?;
    let version = header.get("version").and_then(|v| v.as_u64());
    if version != Some(DATASET_VERSION as u64) {
        return Err(Error::Format(format!("unsupported dataset version {version:?}, expected {DATASET_VERSION}")));
    }
    let header: Header = serde_json::from_value(header)?;
    let values = container::read_f32(payload)?;
    let (sd, ad) = (header.state_dim, header.action_dim);
    if header.offsets.len() != header.episodes.len() + 1 || header.offsets[0] != 0 {
        return Err(Error::Format("episode offsets do not match the episode table".into()));
    }
    if *header.offsets.last().unwrap() != values.len() {
        return Err(Error::Format(format!(
            "payload holds {} values but offsets declare {}",
            values.len(),
            header.offsets.last().unwrap()
        )));
    }
    let mut episodes = Vec::with_capacity(header.episodes.len());
    for (i, eh) in header.episodes.iter().enumerate() {
        let (lo, hi) = (header.offsets[i], header.offsets[i + 1]);
        let t = eh.steps;
        if hi < lo || hi - lo != (t + 1) * sd + t * ad + t {
            return Err(Error::Format(format!("episode {i} has a truncated payload")));
        }
        let chunk = &values[lo..hi];
        let (s, rest) = chunk.split_at((t + 1) * sd);
        let (a, r) = rest.split_at(t * ad);
        episodes.push(EpisodeRecord {
            states: s.chunks(sd.max(1)).map(<[f64]>::to_vec).collect(),
            actions: a.chunks(ad.max(1)).map(<[f64]>::to_vec).collect(),
            rewards: r.to_vec(),
            terminated: eh.terminated,
            truncated: eh.truncated,
            meta: eh.meta.clone(),
        });
    }
    Ok(DatasetFile {
        env_id: header.env_id,
        state_dim: sd,
        action_dim: ad,
        delay_steps: header.delay_steps,
        episodes,
        normalizer: header.normalizer,
        digest: container::sha256_hex(bytes),
    })
}

pub fn save_dataset(path: &Path, episodes: &[EpisodeRecord], norm: &Normalizer) -> Result<String> {
    let bytes = encode_dataset(episodes, norm)?;
    container::write_atomic(path, &bytes)?;
    Ok(container::sha256_hex(&bytes))
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_windows, collect_dataset, normalizer_fit, CollectConfig, PolicyTag, Tier};

    fn sample() -> (Vec<EpisodeRecord>, Normalizer) {
        let eps = collect_dataset(&CollectConfig {
            env_id: EnvId::PointMass2d,
            horizon: 40,
            delay: 2,
            policy: PolicyTag::LqrPointmass,
            tier: Tier::Medium,
            n_episodes: 3,
            seed: 5,
        })
        .unwrap();
        let n = normalizer_fit(&eps).unwrap();
        (eps, n)
    }

    #[test]
    fn roundtrip_at_f32_precision() {
        let (eps, norm) = sample();
        let file = decode_dataset(&encode_dataset(&eps, &norm).unwrap()).unwrap();
        let q: Vec<_> = eps.iter().map(EpisodeRecord::quantized).collect();
        assert_eq!(file.episodes, q);
        assert_eq!(file.normalizer, norm);
        assert_eq!(file.delay_steps, 2);
        assert!(file.delay_warning(2).is_none());
        assert!(file.delay_warning(4).is_some());

        let w1 = build_windows(&q, 2, 4, &norm, 0.99).unwrap();
        let w2 = build_windows(&file.episodes, 2, 4, &norm, 0.99).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let norm = Normalizer::identity(4);
        let file = decode_dataset(&encode_dataset(&[], &norm).unwrap()).unwrap();
        assert!(file.episodes.is_empty());
    }

    #[test]
    fn bytes_are_deterministic() {
        let (eps, norm) = sample();
        assert_eq!(encode_dataset(&eps, &norm).unwrap(), encode_dataset(&eps, &norm).unwrap());
    }

    #[test]
    fn version_and_truncation_errors() {
        let (eps, norm) = sample();
        let bytes = encode_dataset(&eps, &norm).unwrap();
        assert!(matches!(decode_dataset(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));

        let (mut header, payload) = container::decode(&bytes).unwrap();
        header["version"] = serde_json::json!(2);
        let bad = container::encode(&header, payload).unwrap();
        assert!(matches!(decode_dataset(&bad), Err(Error::Format(_))));
    }
}
