//! Versioned text checkpoints. The reference model and the adapter are
//! stored separately so one reference serves many debias runs; the adapter
//! file also carries the polarity classifier q trained alongside it.
//!
//! Layout: a header line with the format version, kind, dimensions, and
//! vocabulary size; for reference checkpoints the vocabulary, one token per
//! line; then named parameter blocks, one row of decimal reals per matrix
//! row. Values are written with Rust's shortest round-trip formatting, so
//! save followed by load is bit-exact and identical models serialize to
//! identical bytes.

use std::fmt::Write as _;

use super::{DebiasAdapter, ModelConfig, ReferenceLM};
use crate::corpus::Vocab;
use crate::numerics::{Matrix, ParameterSet};
use crate::{Error, Result};

const MAGIC: &str = "fairlm-checkpoint";
const VERSION: &str = "v1";

fn header(kind: &str, config: &ModelConfig, vocab: usize) -> String {
    format!(
        "{MAGIC} {VERSION} {kind} d={} b={} layers={} heads={} ctx={} vocab={}\n",
        config.d, config.adapter_dim, config.layers, config.heads, config.ctx, vocab
    )
}

fn write_params(out: &mut String, prefix: &str, params: &ParameterSet) {
    for name in params.names() {
        let m = params.get(name);
        writeln!(out, "param {prefix}{name} {} {}", m.rows(), m.cols()).unwrap();
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
}

struct Parser<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            lines: text.lines().peekable(),
            line_no: 0,
        }
    }

    fn next(&mut self) -> Result<&'a str> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| Error::Parse(format!("checkpoint truncated at line {}", self.line_no)))
    }

    fn fail(&self, message: impl std::fmt::Display) -> Error {
        Error::Parse(format!("checkpoint line {}: {message}", self.line_no))
    }
}

struct Header {
    kind: String,
    config: ModelConfig,
    vocab: usize,
}

fn parse_header(p: &mut Parser) -> Result<Header> {
    let line = p.next()?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 9 || fields[0] != MAGIC {
        return Err(p.fail("not a checkpoint header"));
    }
    if fields[1] != VERSION {
        return Err(p.fail(format!("unsupported format version '{}'", fields[1])));
    }
    let num = |i: usize, key: &str| -> Result<usize> {
        let field: &str = fields[i];
        let value = field
            .strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .ok_or_else(|| Error::Parse(format!("expected {key}=<n>, found '{field}'")))?;
        value
            .parse()
            .map_err(|_| Error::Parse(format!("bad integer in '{field}'")))
    };
    Ok(Header {
        kind: fields[2].to_string(),
        config: ModelConfig {
            d: num(3, "d")?,
            adapter_dim: num(4, "b")?,
            layers: num(5, "layers")?,
            heads: num(6, "heads")?,
            ctx: num(7, "ctx")?,
        },
        vocab: num(8, "vocab")?,
    })
}

fn parse_params(p: &mut Parser) -> Result<Vec<(String, Matrix)>> {
    let mut blocks = Vec::new();
    while p.lines.peek().is_some() {
        let line = p.next()?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "param" {
            return Err(p.fail("expected a 'param <name> <rows> <cols>' block"));
        }
        let name = fields[1].to_string();
        let rows: usize = fields[2].parse().map_err(|_| p.fail("bad row count"))?;
        let cols: usize = fields[3].parse().map_err(|_| p.fail("bad column count"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = p.next()?;
            for field in row.split_whitespace() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| p.fail(format!("bad real '{field}'")))?;
                data.push(v);
            }
        }
        if data.len() != rows * cols {
            return Err(p.fail(format!(
                "block '{name}' has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        blocks.push((name, Matrix::new(rows, cols, data)?));
    }
    Ok(blocks)
}

/// Serialize a reference model.
pub fn save_reference(model: &ReferenceLM) -> String {
    let mut out = header("reference", model.config(), model.vocab().len());
    for token in model.vocab().tokens() {
        out.push_str(token);
        out.push('\n');
    }
    write_params(&mut out, "", model.params());
    out
}

/// Load a reference model, validating every parameter shape against the
/// header dimensions.
pub fn load_reference(text: &str) -> Result<ReferenceLM> {
    let mut p = Parser::new(text);
    let h = parse_header(&mut p)?;
    if h.kind != "reference" {
        return Err(Error::Parse(format!(
            "expected a reference checkpoint, found kind '{}'",
            h.kind
        )));
    }
    h.config.validate()?;
    let mut tokens = Vec::with_capacity(h.vocab);
    for _ in 0..h.vocab {
        tokens.push(p.next()?.to_string());
    }
    let vocab = Vocab::from_tokens(tokens)?;
    let expected = super::graph::parameter_names(&h.config);
    let blocks = parse_params(&mut p)?;
    let got: Vec<&String> = blocks.iter().map(|(n, _)| n).collect();
    if got.len() != expected.len() || got.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(Error::Parse("parameter blocks do not match the model layout".into()));
    }
    let mut params = ParameterSet::new();
    for (name, matrix) in blocks {
        let shape = super::graph::parameter_shape(&h.config, h.vocab, &name);
        if (matrix.rows(), matrix.cols()) != shape {
            return Err(Error::Parse(format!(
                "block '{name}' is {}x{}, expected {}x{}",
                matrix.rows(),
                matrix.cols(),
                shape.0,
                shape.1
            )));
        }
        params.insert(name, matrix);
    }
    ReferenceLM::from_parts(h.config, vocab, params)
}

/// Serialize an adapter together with the polarity classifier that was
/// trained against it. `q` blocks are stored under a `q.` prefix.
pub fn save_adapter(config: &ModelConfig, adapter: &DebiasAdapter, q: &ParameterSet) -> String {
    let mut out = header("adapter", config, 0);
    write_params(&mut out, "", &adapter.params);
    write_params(&mut out, "q.", q);
    out
}

/// Load an adapter checkpoint, returning the adapter and the stored q
/// parameters. The caller's model config must match the header.
pub fn load_adapter(text: &str, config: &ModelConfig) -> Result<(DebiasAdapter, ParameterSet)> {
    let mut p = Parser::new(text);
    let h = parse_header(&mut p)?;
    if h.kind != "adapter" {
        return Err(Error::Parse(format!(
            "expected an adapter checkpoint, found kind '{}'",
            h.kind
        )));
    }
    if h.config != *config {
        return Err(Error::Parse(
            "adapter checkpoint dimensions do not match the reference model".into(),
        ));
    }
    let mut adapter_params = ParameterSet::new();
    let mut q = ParameterSet::new();
    for (name, matrix) in parse_params(&mut p)? {
        if let Some(stripped) = name.strip_prefix("q.") {
            q.insert(stripped, matrix);
        } else {
            adapter_params.insert(name, matrix);
        }
    }
    if adapter_params.names() != ["w1", "w2"] {
        return Err(Error::Parse("adapter checkpoint must contain w1 and w2".into()));
    }
    let w1 = adapter_params.get("w1");
    let w2 = adapter_params.get("w2");
    if (w1.rows(), w1.cols()) != (config.adapter_dim, config.d)
        || (w2.rows(), w2.cols()) != (config.d, config.adapter_dim)
    {
        return Err(Error::Parse("adapter parameter shapes do not match config".into()));
    }
    Ok((DebiasAdapter::from_params(adapter_params), q))
}
