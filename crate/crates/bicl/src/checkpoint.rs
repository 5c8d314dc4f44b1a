//! Plain-text model checkpoints with exact `f64` round-trip.
//!
//! ```text
//! bicl-checkpoint 1
//! model mlp 784,100,100,10 hidden
//! lambda <segment> <d0>x<d1> <values...>
//! w <segment> <d0> <values...>
//! ```
//!
//! Values are written in Rust's shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use bicl_core::models::{Mlp, SplitParams, SplitScheme, Vae};
use bicl_core::ParamVector;

use crate::config::Keyword;

const MAGIC: &str = "bicl-checkpoint 1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    Mlp(Mlp),
    Vae(Vae),
}

impl ModelSpec {
    fn layout_zeros(&self) -> SplitParams {
        match self {
            ModelSpec::Mlp(m) => m.layout().zeros(),
            ModelSpec::Vae(v) => v.layout().zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub params: SplitParams,
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.parse().with_context(|| format!("bad size {x:?}"))).collect()
}

fn write_block(out: &mut String, tag: &str, p: &ParamVector) {
    for (i, seg) in p.segments().iter().enumerate() {
        let shape: Vec<String> = seg.shape.iter().map(|d| d.to_string()).collect();
        let _ = write!(out, "{tag} {} {}", seg.name, shape.join("x"));
        for v in p.segment(i) {
            let _ = write!(out, " {v:?}");
        }
        out.push('\n');
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        match &self.model {
            ModelSpec::Mlp(m) => {
                let _ = writeln!(out, "model mlp {} {}", list(m.sizes()), m.scheme().keyword());
            }
            ModelSpec::Vae(v) => {
                let hid = |h: &[usize]| if h.is_empty() { "-".to_string() } else { list(h) };
                let _ = writeln!(
                    out,
                    "model vae {} {} {} {} {}",
                    v.input_dim(),
                    hid(v.encoder_hidden()),
                    v.latent_dim(),
                    hid(v.decoder_hidden()),
                    v.scheme().keyword()
                );
            }
        }
        write_block(&mut out, "lambda", &self.params.lambda);
        write_block(&mut out, "w", &self.params.w);
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            bail!("not a checkpoint (missing `{MAGIC}` header)");
        }
        let model_line = lines.next().ok_or_else(|| anyhow!("missing model line"))?;
        let f: Vec<&str> = model_line.split_whitespace().collect();
        let scheme = |s: &str| SplitScheme::parse_keyword(s).ok_or_else(|| anyhow!("bad split scheme {s:?}"));
        let model = match f.as_slice() {
            ["model", "mlp", sizes, sch] => ModelSpec::Mlp(Mlp::new(parse_list(sizes)?, scheme(sch)?)?),
            ["model", "vae", input, enc, latent, dec, sch] => ModelSpec::Vae(Vae::new(
                input.parse()?,
                parse_list(enc)?,
                latent.parse()?,
                parse_list(dec)?,
                scheme(sch)?,
            )?),
            _ => bail!("bad model line {model_line:?}"),
        };
        let mut params = model.layout_zeros();
        let mut filled = 0usize;
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (tag, name, shape) = (it.next(), it.next(), it.next());
            let (Some(tag), Some(name), Some(shape)) = (tag, name, shape) else {
                bail!("line {}: truncated segment", n + 3);
            };
            let target = match tag {
                "lambda" => &mut params.lambda,
                "w" => &mut params.w,
                _ => bail!("line {}: unknown block {tag:?}", n + 3),
            };
            let idx = target.segment_index(name).ok_or_else(|| anyhow!("segment {name} not in {tag} for this model"))?;
            let expect: Vec<String> = target.segments()[idx].shape.iter().map(|d| d.to_string()).collect();
            if shape != expect.join("x") {
                bail!("segment {name}: shape {shape} but model expects {}", expect.join("x"));
            }
            let values: Vec<f64> = it.map(|v| v.parse::<f64>()).collect::<Result<_, _>>()
                .with_context(|| format!("segment {name}: bad value"))?;
            let slot = target.segment_mut(idx);
            if values.len() != slot.len() {
                bail!("segment {name}: {} values, expected {}", values.len(), slot.len());
            }
            slot.copy_from_slice(&values);
            filled += 1;
        }
        let total = params.lambda.segments().len() + params.w.segments().len();
        if filled != total {
            bail!("checkpoint holds {filled} of {total} segments");
        }
        Ok(Checkpoint { model, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
