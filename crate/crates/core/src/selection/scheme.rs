use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::{PolicyTag, SelectionError, UpdateMask};
use crate::engine::{Model, Scalar};
use crate::registry::NeuronTable;

/// Fraction of a layer's channels trained by a static scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelRatio {
    Zero,
    Eighth,
    Quarter,
    Half,
    One,
}

impl ChannelRatio {
    fn fraction(self) -> (usize, usize) {
        match self {
            ChannelRatio::Zero => (0, 1),
            ChannelRatio::Eighth => (1, 8),
            ChannelRatio::Quarter => (1, 4),
            ChannelRatio::Half => (1, 2),
            ChannelRatio::One => (1, 1),
        }
    }

    /// `ceil(ratio * channels)`.
    pub fn channels(self, channels: usize) -> usize {
        let (num, den) = self.fraction();
        (num * channels).div_ceil(den)
    }
}

impl FromStr for ChannelRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "0" | "0.0" => ChannelRatio::Zero,
            "1/8" | "0.125" => ChannelRatio::Eighth,
            "1/4" | "0.25" => ChannelRatio::Quarter,
            "1/2" | "0.5" => ChannelRatio::Half,
            "1" | "1.0" => ChannelRatio::One,
            other => return Err(format!("ratio {other:?} not in {{0, 1/8, 1/4, 1/2, 1}}")),
        })
    }
}

impl fmt::Display for ChannelRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelRatio::Zero => "0",
            ChannelRatio::Eighth => "1/8",
            ChannelRatio::Quarter => "1/4",
            ChannelRatio::Half => "1/2",
            ChannelRatio::One => "1",
        })
    }
}

/// A fixed sub-network: per-layer channel ratios plus a bias depth.
///
/// Text format, one `key = value` per line, `#` starts a comment:
///
/// ```text
/// ratio.* = 1/8          # default for every neuron-owning layer
/// ratio.3 = 1/2          # chain layer 3
/// bias_depth = 2         # train all biases from chain layer 2 onward
/// classifier_always = true
/// ```
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StaticScheme {
    pub default_ratio: Option<ChannelRatio>,
    pub ratios: BTreeMap<usize, ChannelRatio>,
    pub bias_depth: Option<usize>,
    pub classifier_always: bool,
}

impl StaticScheme {
    pub fn parse(text: &str) -> Result<Self, SelectionError> {
        let mut scheme = StaticScheme::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let err = |message: String| SelectionError::SchemeParse {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            match key {
                "bias_depth" => {
                    scheme.bias_depth = Some(
                        value
                            .parse()
                            .map_err(|_| err(format!("bad bias_depth {value:?}")))?,
                    )
                }
                "classifier_always" => {
                    scheme.classifier_always = value
                        .parse()
                        .map_err(|_| err(format!("bad boolean {value:?}")))?
                }
                "ratio.*" => scheme.default_ratio = Some(value.parse().map_err(err)?),
                _ => {
                    let layer = key
                        .strip_prefix("ratio.")
                        .and_then(|l| l.parse::<usize>().ok())
                        .ok_or_else(|| err(format!("unknown key {key:?}")))?;
                    scheme.ratios.insert(layer, value.parse().map_err(err)?);
                }
            }
        }
        Ok(scheme)
    }

    pub fn load(path: &Path) -> Result<Self, SelectionError> {
        let text = std::fs::read_to_string(path).map_err(|e| SelectionError::SchemeIo {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(r) = self.default_ratio {
            out.push_str(&format!("ratio.* = {r}\n"));
        }
        for (l, r) in &self.ratios {
            out.push_str(&format!("ratio.{l} = {r}\n"));
        }
        if let Some(d) = self.bias_depth {
            out.push_str(&format!("bias_depth = {d}\n"));
        }
        out.push_str(&format!("classifier_always = {}\n", self.classifier_always));
        out
    }
}

/// Expands a scheme into the mask it trains on `model`.
///
/// Layer `l` trains its first `ceil(ratio_l * C_out)` channels fully. From
/// `bias_depth` onward every other neuron with a bias trains its bias only.
pub fn materialize_static<F: Scalar>(
    scheme: &StaticScheme,
    model: &Model<F>,
) -> Result<UpdateMask, SelectionError> {
    let table = NeuronTable::from_model(model);
    let layers = model.len();
    for &l in scheme.ratios.keys() {
        if l >= layers || model.layers()[l].neuron_count() == 0 {
            return Err(SelectionError::SchemeMismatch(format!(
                "ratio given for layer {l}, which owns no neurons"
            )));
        }
    }
    if let Some(d) = scheme.bias_depth.filter(|&d| d > layers) {
        return Err(SelectionError::SchemeMismatch(format!(
            "bias_depth {d} beyond the {layers}-layer chain"
        )));
    }
    let classifier = table.classifier_layer();
    let mut trainable = BTreeSet::new();
    let mut bias_only = BTreeSet::new();
    for (l, layer) in model.layers().iter().enumerate() {
        let range = table.layer_range(l);
        if range.is_empty() {
            continue;
        }
        let ratio = scheme
            .ratios
            .get(&l)
            .copied()
            .or(scheme.default_ratio)
            .unwrap_or(ChannelRatio::Zero);
        let full = if scheme.classifier_always && classifier == Some(l) {
            range.len()
        } else {
            ratio.channels(range.len())
        };
        let biases = layer.has_bias() && scheme.bias_depth.is_some_and(|d| l >= d);
        for (c, id) in range.enumerate() {
            if c < full {
                trainable.insert(id);
            } else if biases {
                bias_only.insert(id);
            }
        }
    }
    UpdateMask::new(0, PolicyTag::Static, trainable, bias_only, table.costs())
}
