//! Plain-text checkpoints.
//!
//! ```text
//! srdp-checkpoint v1
//! meta <key> <value>
//! net <name> <n_layers>
//! layer <out> <in> <activation>
//! w <out*in floats, row-major>
//! b <out floats>
//! adam <name> <step> <lr> <beta1> <beta2> <eps> <n>
//! m <n floats>
//! v <n floats>
//! rng <name> <seed> <stream> <word_pos>
//! floats <name> <values...>
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is lossless.
//! Entries are emitted in key order, which makes the bytes deterministic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, DenseNet, Layer, TimeEmbedding};
use crate::policy::{Bounds, PolicyArch, PolicyConfig, PolicyVariant, SrdpPolicy};
use crate::rng::RngPosition;

const HEADER: &str = "srdp-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    nets: BTreeMap<String, DenseNet>,
    adams: BTreeMap<String, AdamState>,
    rngs: BTreeMap<String, RngPosition>,
    floats: BTreeMap<String, Vec<f64>>,
}

fn parse_err<T>(line: usize, msg: impl std::fmt::Display) -> Result<T> {
    Err(Error::Parse(format!("checkpoint line {line}: {msg}")))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for v in values {
        write!(s, " {v:e}").expect("string write");
    }
    s
}

fn join_usize(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad integer `{x}` in list `{s}`"))))
        .collect()
}

fn key_ok(k: &str) -> bool {
    !k.is_empty() && !k.contains(char::is_whitespace)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    /// Next line split into (line number, tag, rest of fields).
    fn next(&mut self) -> Result<(usize, &'a str, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            let mut fields = raw.split_whitespace();
            if let Some(tag) = fields.next() {
                return Ok((i + 1, tag, fields.collect()));
            }
        }
        Err(Error::Parse("checkpoint ended without `end`".into()))
    }

    fn expect(&mut self, tag: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, t, fields) = self.next()?;
        if t != tag {
            return parse_err(n, format!("expected `{tag}`, found `{t}`"));
        }
        Ok((n, fields))
    }
}

fn num<T: FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().or_else(|_| parse_err(line, format!("cannot parse `{s}`")))
}

fn floats(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields.iter().map(|f| num(line, f)).collect()
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(key_ok(key) && !value.contains('\n'), "bad meta entry `{key}`");
        self.meta.insert(key.to_string(), value);
    }

    pub fn set_net(&mut self, name: &str, net: &DenseNet) {
        assert!(key_ok(name), "bad net name `{name}`");
        self.nets.insert(name.to_string(), net.clone());
    }

    pub fn set_adam(&mut self, name: &str, state: &AdamState) {
        assert!(key_ok(name), "bad adam name `{name}`");
        self.adams.insert(name.to_string(), state.clone());
    }

    pub fn set_rng(&mut self, name: &str, pos: RngPosition) {
        assert!(key_ok(name), "bad rng name `{name}`");
        self.rngs.insert(name.to_string(), pos);
    }

    pub fn set_floats(&mut self, name: &str, values: &[f64]) {
        assert!(key_ok(name), "bad floats name `{name}`");
        self.floats.insert(name.to_string(), values.to_vec());
    }

    fn missing<T>(what: &str, name: &str) -> Result<T> {
        Err(Error::Parse(format!("checkpoint has no {what} `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).map_or_else(|| Self::missing("meta", key), Ok)
    }

    pub fn meta_parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| Error::Parse(format!("meta `{key}` has bad value `{raw}`")))
    }

    pub fn has_meta(&self, key: &str) -> bool {
        self.meta.contains_key(key)
    }

    pub fn net(&self, name: &str) -> Result<&DenseNet> {
        self.nets.get(name).map_or_else(|| Self::missing("net", name), Ok)
    }

    pub fn has_net(&self, name: &str) -> bool {
        self.nets.contains_key(name)
    }

    pub fn adam(&self, name: &str) -> Result<&AdamState> {
        self.adams.get(name).map_or_else(|| Self::missing("adam state", name), Ok)
    }

    pub fn rng(&self, name: &str) -> Result<RngPosition> {
        self.rngs.get(name).copied().map_or_else(|| Self::missing("rng", name), Ok)
    }

    pub fn floats(&self, name: &str) -> Result<&[f64]> {
        self.floats.get(name).map(Vec::as_slice).map_or_else(|| Self::missing("floats", name), Ok)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line(HEADER.to_string());
        for (k, v) in &self.meta {
            line(format!("meta {k} {v}"));
        }
        for (name, net) in &self.nets {
            line(format!("net {name} {}", net.layers().len()));
            for layer in net.layers() {
                line(format!("layer {} {} {}", layer.output_dim(), layer.input_dim(), layer.activation.name()));
                line(format!("w{}", join(layer.weights.iter().copied())));
                line(format!("b{}", join(layer.biases.iter().copied())));
            }
        }
        for (name, a) in &self.adams {
            let c = a.config;
            line(format!(
                "adam {name} {} {:e} {:e} {:e} {:e} {}",
                a.step_count,
                c.lr,
                c.beta1,
                c.beta2,
                c.eps,
                a.first_moment.len()
            ));
            line(format!("m{}", join(a.first_moment.iter().copied())));
            line(format!("v{}", join(a.second_moment.iter().copied())));
        }
        for (name, r) in &self.rngs {
            line(format!("rng {name} {} {} {}", r.seed, r.stream, r.word_pos));
        }
        for (name, v) in &self.floats {
            line(format!("floats {name}{}", join(v.iter().copied())));
        }
        line("end".to_string());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines { inner: text.lines().enumerate() };
        let (n, tag, rest) = lines.next()?;
        if tag != "srdp-checkpoint" || rest != ["v1"] {
            return parse_err(n, format!("expected header `{HEADER}`"));
        }
        let mut ck = Checkpoint::new();
        loop {
            let (n, tag, f) = lines.next()?;
            match tag {
                "end" => return Ok(ck),
                "meta" => {
                    if f.len() != 2 {
                        return parse_err(n, "meta needs a key and one value");
                    }
                    ck.meta.insert(f[0].to_string(), f[1].to_string());
                }
                "net" => {
                    if f.len() != 2 {
                        return parse_err(n, "net needs a name and a layer count");
                    }
                    let count: usize = num(n, f[1])?;
                    let mut layers = Vec::with_capacity(count);
                    for _ in 0..count {
                        let (ln, lf) = lines.expect("layer")?;
                        if lf.len() != 3 {
                            return parse_err(ln, "layer needs out, in and activation");
                        }
                        let (out, inp): (usize, usize) = (num(ln, lf[0])?, num(ln, lf[1])?);
                        let activation = Activation::parse(lf[2])?;
                        let (wn, wf) = lines.expect("w")?;
                        let w = floats(wn, &wf)?;
                        let weights = Array2::from_shape_vec((out, inp), w)
                            .or_else(|_| parse_err(wn, format!("expected {} weights", out * inp)))?;
                        let (bn, bf) = lines.expect("b")?;
                        let b = floats(bn, &bf)?;
                        if b.len() != out {
                            return parse_err(bn, format!("expected {out} biases"));
                        }
                        layers.push(Layer { weights, biases: Array1::from(b), activation });
                    }
                    ck.nets.insert(f[0].to_string(), DenseNet::from_layers(layers)?);
                }
                "adam" => {
                    if f.len() != 7 {
                        return parse_err(n, "adam needs name, step, lr, beta1, beta2, eps, n");
                    }
                    let config = AdamConfig { lr: num(n, f[2])?, beta1: num(n, f[3])?, beta2: num(n, f[4])?, eps: num(n, f[5])? };
                    let len: usize = num(n, f[6])?;
                    let (mn, mf) = lines.expect("m")?;
                    let first_moment = floats(mn, &mf)?;
                    let (vn, vf) = lines.expect("v")?;
                    let second_moment = floats(vn, &vf)?;
                    if first_moment.len() != len || second_moment.len() != len {
                        return parse_err(vn, format!("adam moments must have {len} entries"));
                    }
                    let state = AdamState { config, first_moment, second_moment, step_count: num(n, f[1])? };
                    ck.adams.insert(f[0].to_string(), state);
                }
                "rng" => {
                    if f.len() != 4 {
                        return parse_err(n, "rng needs name, seed, stream, word_pos");
                    }
                    let pos = RngPosition { seed: num(n, f[1])?, stream: num(n, f[2])?, word_pos: num(n, f[3])? };
                    ck.rngs.insert(f[0].to_string(), pos);
                }
                "floats" => {
                    let Some((name, rest)) = f.split_first() else {
                        return parse_err(n, "floats needs a name");
                    };
                    ck.floats.insert(name.to_string(), floats(n, rest)?);
                }
                other => return parse_err(n, format!("unknown entry `{other}`")),
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Stores a policy's manifest and networks under `prefix`.
    pub fn set_policy(&mut self, prefix: &str, policy: &SrdpPolicy) {
        let key = |k: &str| format!("{prefix}.{k}");
        self.set_meta(&key("variant"), policy.variant().name());
        self.set_meta(&key("lambda"), format!("{:e}", policy.lambda()));
        self.set_meta(&key("state_dim"), policy.state_dim());
        self.set_meta(&key("action_dim"), policy.action_dim());
        let te = policy.time_embedding();
        self.set_meta(&key("time_dim"), te.dim());
        self.set_meta(&key("time_base"), format!("{:e}", te.base()));
        let trunk: Vec<usize> = policy.encoder.layers().iter().map(Layer::output_dim).collect();
        let head: Vec<usize> = policy.diffusion_head.layers().iter().map(Layer::output_dim).collect();
        self.set_meta(&key("trunk"), join_usize(&trunk));
        let head_hidden = &head[..head.len() - 1];
        self.set_meta(&key("head_hidden"), if head_hidden.is_empty() { "-".into() } else { join_usize(head_hidden) });
        self.set_floats(&key("betas"), policy.schedule().betas());
        match policy.clip() {
            Some(b) => {
                self.set_floats(&key("clip_lo"), &b.lo);
                self.set_floats(&key("clip_hi"), &b.hi);
            }
            None => {
                self.floats.remove(&key("clip_lo"));
                self.floats.remove(&key("clip_hi"));
            }
        }
        self.set_net(&key("time_proj"), &policy.time_proj);
        self.set_net(&key("encoder"), &policy.encoder);
        self.set_net(&key("diffusion_head"), &policy.diffusion_head);
        match &policy.state_head {
            Some(h) => self.set_net(&key("state_head"), h),
            None => {
                self.nets.remove(&key("state_head"));
            }
        }
    }

    pub fn policy(&self, prefix: &str) -> Result<SrdpPolicy> {
        let key = |k: &str| format!("{prefix}.{k}");
        let variant = match self.meta(&key("variant"))? {
            "srdp" => PolicyVariant::Srdp { lambda: self.meta_parse(&key("lambda"))? },
            "bc_diffusion" => PolicyVariant::BcDiffusion,
            other => return Err(Error::Parse(format!("unknown policy variant `{other}`"))),
        };
        let time_embedding = TimeEmbedding::new(self.meta_parse(&key("time_dim"))?, self.meta_parse(&key("time_base"))?)?;
        let arch = PolicyArch {
            trunk: parse_usize_list(self.meta(&key("trunk"))?)?,
            head_hidden: parse_usize_list(self.meta(&key("head_hidden"))?)?,
            time_dim: time_embedding.dim(),
        };
        let clip = if self.floats.contains_key(&key("clip_lo")) {
            Some(Bounds { lo: self.floats(&key("clip_lo"))?.to_vec(), hi: self.floats(&key("clip_hi"))?.to_vec() })
        } else {
            None
        };
        let cfg = PolicyConfig {
            variant,
            arch,
            state_dim: self.meta_parse(&key("state_dim"))?,
            action_dim: self.meta_parse(&key("action_dim"))?,
            schedule: NoiseSchedule::from_betas(self.floats(&key("betas"))?.to_vec())?,
            time_embedding,
            clip,
        };
        let state_head = if self.has_net(&key("state_head")) { Some(self.net(&key("state_head"))?.clone()) } else { None };
        SrdpPolicy::from_parts(
            cfg,
            self.net(&key("time_proj"))?.clone(),
            self.net(&key("encoder"))?.clone(),
            self.net(&key("diffusion_head"))?.clone(),
            state_head,
        )
    }
}
