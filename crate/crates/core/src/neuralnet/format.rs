//! Line-oriented text encoding for trained models.
//!
//! A network block looks like
//!
//! ```text
//! cmi-mlp 1
//! activation tanh
//! dims 2 8 1
//! layer 0 weights <8·2 values, row-major, out × in>
//! layer 0 bias <8 values>
//! layer 1 weights <1·8 values>
//! layer 1 bias <1 value>
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! decoding reproduces every parameter bit for bit. Generator and regressor
//! records prepend a header line and `normalizer` lines to the same block
//! (see [`crate::generator::GeneratorModel::to_text`]).

use ndarray::{Array1, Array2};

use super::{Activation, Layer, Mlp};
use crate::error::{CmiError, Result};
use crate::normalize::Standardizer;

pub const MLP_MAGIC: &str = "cmi-mlp";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_values(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.push(' ');
        out.push_str(&v.to_string());
    }
}

pub fn encode_mlp(net: &Mlp, out: &mut String) {
    out.push_str(&format!("{MLP_MAGIC} {FORMAT_VERSION}\n"));
    out.push_str(&format!("activation {}\n", net.activation().name()));
    out.push_str("dims");
    for d in net.dims() {
        out.push_str(&format!(" {d}"));
    }
    out.push('\n');
    for (l, layer) in net.layers().iter().enumerate() {
        out.push_str(&format!("layer {l} weights"));
        write_values(out, layer.weights.iter().copied());
        out.push('\n');
        out.push_str(&format!("layer {l} bias"));
        write_values(out, layer.bias.iter().copied());
        out.push('\n');
    }
    out.push_str("end\n");
}

pub fn mlp_to_text(net: &Mlp) -> String {
    let mut s = String::new();
    encode_mlp(net, &mut s);
    s
}

pub fn mlp_from_text(text: &str) -> Result<Mlp> {
    let mut reader = LineReader::new(text);
    let net = decode_mlp(&mut reader)?;
    reader.expect_eof()?;
    Ok(net)
}

/// Cursor over non-empty lines, tracking 1-based line numbers for errors.
pub(crate) struct LineReader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last_line: usize,
}

impl<'a> LineReader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        LineReader {
            lines: text.lines().enumerate().peekable(),
            last_line: 0,
        }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> CmiError {
        CmiError::Parse {
            line: self.last_line,
            column: 1,
            message: message.into(),
        }
    }

    /// Next non-blank line split into whitespace tokens.
    pub(crate) fn next_tokens(&mut self) -> Result<Vec<&'a str>> {
        for (i, line) in self.lines.by_ref() {
            self.last_line = i + 1;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok(tokens);
            }
        }
        Err(self.error("unexpected end of input"))
    }

    pub(crate) fn expect_eof(&mut self) -> Result<()> {
        for (i, line) in self.lines.by_ref() {
            if !line.trim().is_empty() {
                self.last_line = i + 1;
                return Err(self.error("trailing content after end of record"));
            }
        }
        Ok(())
    }

    pub(crate) fn parse_usize(&self, token: &str) -> Result<usize> {
        token
            .parse()
            .map_err(|_| self.error(format!("expected a non-negative integer, got `{token}`")))
    }

    pub(crate) fn parse_values(&self, tokens: &[&str]) -> Result<Vec<f64>> {
        tokens
            .iter()
            .map(|t| match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(self.error(format!("non-finite value `{t}`"))),
                Err(_) => Err(self.error(format!("expected a number, got `{t}`"))),
            })
            .collect()
    }

    pub(crate) fn header(&mut self, magic: &str) -> Result<()> {
        let tokens = self.next_tokens()?;
        match tokens.as_slice() {
            [m, v] if *m == magic => {
                let version = self.parse_usize(v)?;
                if version as u32 != FORMAT_VERSION {
                    return Err(self.error(format!("unsupported {magic} version {version}")));
                }
                Ok(())
            }
            _ => Err(self.error(format!("expected `{magic} {FORMAT_VERSION}` header"))),
        }
    }

    /// `key value`
    pub(crate) fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let tokens = self.next_tokens()?;
        match tokens.as_slice() {
            [k, v] if *k == key => self.parse_usize(v),
            _ => Err(self.error(format!("expected `{key} <integer>`"))),
        }
    }

    /// `normalizer <name> mean …` followed by `normalizer <name> scale …`.
    pub(crate) fn normalizer(&mut self, name: &str, dim: Option<usize>) -> Result<Standardizer> {
        let mut read = |field: &str| -> Result<Vec<f64>> {
            let tokens = self.next_tokens()?;
            if tokens.len() < 3 || tokens[0] != "normalizer" || tokens[1] != name || tokens[2] != field {
                return Err(self.error(format!("expected `normalizer {name} {field} ...`")));
            }
            self.parse_values(&tokens[3..])
        };
        let mean = read("mean")?;
        let scale = read("scale")?;
        if let Some(d) = dim {
            if mean.len() != d {
                return Err(self.error(format!(
                    "normalizer {name} has {} coordinates, expected {d}",
                    mean.len()
                )));
            }
        }
        Standardizer::new(mean, scale).map_err(|e| self.error(e.to_string()))
    }
}

pub(crate) fn encode_normalizer(out: &mut String, name: &str, s: &Standardizer) {
    out.push_str(&format!("normalizer {name} mean"));
    write_values(out, s.mean().iter().copied());
    out.push('\n');
    out.push_str(&format!("normalizer {name} scale"));
    write_values(out, s.scale().iter().copied());
    out.push('\n');
}

pub(crate) fn decode_mlp(reader: &mut LineReader<'_>) -> Result<Mlp> {
    reader.header(MLP_MAGIC)?;
    let tokens = reader.next_tokens()?;
    let activation: Activation = match tokens.as_slice() {
        ["activation", a] => a.parse().map_err(|e: CmiError| reader.error(e.to_string()))?,
        _ => return Err(reader.error("expected `activation <relu|tanh>`")),
    };
    let tokens = reader.next_tokens()?;
    if tokens.first() != Some(&"dims") || tokens.len() < 3 {
        return Err(reader.error("expected `dims <d0> <d1> ...` with at least two widths"));
    }
    let dims = tokens[1..]
        .iter()
        .map(|t| reader.parse_usize(t))
        .collect::<Result<Vec<_>>>()?;
    if dims.contains(&0) {
        return Err(reader.error("layer widths must be positive"));
    }

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (l, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let expected = fan_in
            .checked_mul(fan_out)
            .ok_or_else(|| reader.error("layer size overflows"))?;
        let weights = {
            let tokens = reader.next_tokens()?;
            if tokens.len() < 3 || tokens[0] != "layer" || tokens[2] != "weights" {
                return Err(reader.error(format!("expected `layer {l} weights ...`")));
            }
            if reader.parse_usize(tokens[1])? != l {
                return Err(reader.error(format!("layers out of order, expected layer {l}")));
            }
            let values = reader.parse_values(&tokens[3..])?;
            if values.len() != expected {
                return Err(reader.error(format!(
                    "layer {l} weights: expected {expected} values, found {}",
                    values.len()
                )));
            }
            Array2::from_shape_vec((fan_out, fan_in), values)
                .map_err(|e| reader.error(e.to_string()))?
        };
        let bias = {
            let tokens = reader.next_tokens()?;
            if tokens.len() < 3 || tokens[0] != "layer" || tokens[2] != "bias" {
                return Err(reader.error(format!("expected `layer {l} bias ...`")));
            }
            if reader.parse_usize(tokens[1])? != l {
                return Err(reader.error(format!("layers out of order, expected layer {l}")));
            }
            let values = reader.parse_values(&tokens[3..])?;
            if values.len() != fan_out {
                return Err(reader.error(format!(
                    "layer {l} bias: expected {fan_out} values, found {}",
                    values.len()
                )));
            }
            Array1::from(values)
        };
        layers.push(Layer { weights, bias });
    }
    let tokens = reader.next_tokens()?;
    if tokens != ["end"] {
        return Err(reader.error("expected `end`"));
    }
    Mlp::from_layers(activation, layers)
}
