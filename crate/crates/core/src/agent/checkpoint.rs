//! Binary checkpoint; the byte layout is documented in `docs/checkpoint.md`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{flatten, Agent, AgentConfig, AgentError, Head, Layer, Mlp};

pub const MAGIC: &[u8; 4] = b"LFO1";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn f64s(&mut self, xs: &[f64]) {
        xs.iter()
            .for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AgentError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                AgentError::Corrupt(format!("truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, AgentError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, AgentError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, AgentError> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| AgentError::Corrupt("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

const NETWORKS: u32 = 4;

fn nets(agent: &Agent) -> [&Mlp; 4] {
    [
        &agent.actor,
        &agent.critic,
        &agent.actor_target,
        &agent.critic_target,
    ]
}

/// Serializes parameters, optimizer moments and config.
pub fn write_checkpoint(agent: &Agent) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&agent.config).expect("config serializes");
    w.u32(config.len() as u32);
    w.0.extend_from_slice(&config);
    w.u64(agent.updates);
    w.u64(agent.actor_opt.t);
    w.u64(agent.critic_opt.t);
    w.u32(NETWORKS);
    for net in nets(agent) {
        w.u32(net.layers.len() as u32);
        for l in &net.layers {
            w.u32(l.outputs() as u32);
            w.u32(l.inputs() as u32);
        }
    }
    for net in nets(agent) {
        w.f64s(&net.flat_params());
    }
    for opt in [&agent.actor_opt, &agent.critic_opt] {
        w.f64s(&flatten(&opt.m));
        w.f64s(&flatten(&opt.v));
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Agent, AgentError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(AgentError::Corrupt("missing LFO1 magic".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader {
        buf: payload,
        pos: 4,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(AgentError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != stored {
        return Err(AgentError::Corrupt("checksum mismatch".into()));
    }
    let config_len = r.u32()? as usize;
    let config: AgentConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| AgentError::Corrupt(format!("config: {e}")))?;
    config.validate()?;
    let updates = r.u64()?;
    let actor_t = r.u64()?;
    let critic_t = r.u64()?;
    if r.u32()? != NETWORKS {
        return Err(AgentError::Corrupt("unexpected network count".into()));
    }
    let [v, u] = config.action_bounds;
    let heads = [
        Head::TanhScaled { lo: v, hi: u },
        Head::Identity,
        Head::TanhScaled { lo: v, hi: u },
        Head::Identity,
    ];
    let mut shapes = Vec::with_capacity(4);
    for head in heads {
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            layers.push(Layer::zeros(inp, out));
        }
        if layers.is_empty() || layers.windows(2).any(|p| p[0].outputs() != p[1].inputs()) {
            return Err(AgentError::Corrupt("inconsistent layer dimensions".into()));
        }
        shapes.push(Mlp { layers, head });
    }
    if shapes[0].dims() != shapes[2].dims() || shapes[1].dims() != shapes[3].dims() {
        return Err(AgentError::Corrupt(
            "target networks differ in shape from online networks".into(),
        ));
    }
    for net in &mut shapes {
        let values = r.f64s(net.parameter_count())?;
        net.set_flat_params(&values)?;
    }
    let mut it = shapes.into_iter();
    let (actor, critic, actor_target, critic_target) = (
        it.next().expect("4"),
        it.next().expect("4"),
        it.next().expect("4"),
        it.next().expect("4"),
    );
    let mut agent = Agent::from_parts(config, actor, critic, ChaCha8Rng::seed_from_u64(0));
    agent.actor_target = actor_target;
    agent.critic_target = critic_target;
    agent.updates = updates;
    for (opt, net, t) in [
        (&mut agent.actor_opt, &agent.actor, actor_t),
        (&mut agent.critic_opt, &agent.critic, critic_t),
    ] {
        opt.t = t;
        let mut m = Mlp::zeros(&net.dims(), Head::Identity);
        m.set_flat_params(&r.f64s(net.parameter_count())?)?;
        let mut v = m.clone();
        v.set_flat_params(&r.f64s(net.parameter_count())?)?;
        opt.m = m.layers;
        opt.v = v.layers;
    }
    if r.pos != payload.len() {
        return Err(AgentError::Corrupt(format!(
            "{} trailing bytes",
            payload.len() - r.pos
        )));
    }
    Ok(agent)
}

pub fn save_checkpoint(agent: &Agent, path: impl AsRef<Path>) -> Result<(), AgentError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&write_checkpoint(agent))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Agent, AgentError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}
