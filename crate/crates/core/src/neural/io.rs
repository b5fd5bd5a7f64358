//! Text parameter files.
//!
//! ```text
//! NDKF-MLP v1
//! spec <input_dim> <output_dim> <batch_norm 0|1> <dropout_rate> <n_hidden> <w1> .. <wn>
//! layer <i> <rows> <cols>
//! <rows lines of cols values>
//! bias <rows values>
//! bn <i> <width>
//! running_mean <values>
//! running_var <values>
//! scale <values>
//! shift <values>
//! end
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every f64.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{BatchNorm, Dense, MlpParams, MlpSpec, Mode};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

const MAGIC: &str = "NDKF-MLP v1";

fn fmt_values(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.16e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_params<W: Write>(params: &MlpParams, mut sink: W) -> Result<()> {
    let spec = &params.spec;
    writeln!(sink, "{MAGIC}")?;
    write!(
        sink,
        "spec {} {} {} {:.16e} {}",
        spec.input_dim,
        spec.output_dim,
        u8::from(spec.use_batch_norm),
        spec.dropout_rate,
        spec.hidden_layers.len()
    )?;
    for w in &spec.hidden_layers {
        write!(sink, " {w}")?;
    }
    writeln!(sink)?;
    for (i, layer) in params.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.shape();
        writeln!(sink, "layer {i} {rows} {cols}")?;
        for r in 0..rows {
            writeln!(sink, "{}", fmt_values(layer.weight.row_slice(r)))?;
        }
        writeln!(sink, "bias {}", fmt_values(layer.bias.as_slice()))?;
    }
    for (i, bn) in params.norms.iter().enumerate() {
        writeln!(sink, "bn {i} {}", bn.scale.dim())?;
        writeln!(sink, "running_mean {}", fmt_values(bn.running_mean.as_slice()))?;
        writeln!(sink, "running_var {}", fmt_values(bn.running_var.as_slice()))?;
        writeln!(sink, "scale {}", fmt_values(bn.scale.as_slice()))?;
        writeln!(sink, "shift {}", fmt_values(bn.shift.as_slice()))?;
    }
    writeln!(sink, "end")?;
    sink.flush()?;
    Ok(())
}

pub fn save_params(params: &MlpParams, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_params(params, std::io::BufWriter::new(file))
}

struct Lines<R> {
    inner: std::io::Lines<BufReader<R>>,
    line_no: usize,
}

impl<R: Read> Lines<R> {
    fn next_line(&mut self, expecting: &str) -> Result<String> {
        self.line_no += 1;
        match self.inner.next() {
            Some(line) => Ok(line?),
            None => Err(malformed(self.line_no, &format!("unexpected end of file, expected {expecting}"))),
        }
    }

    /// Reads a line of the form `<tag> <values..>` and returns the values.
    fn tagged(&mut self, tag: &str, count: usize) -> Result<Vec<f64>> {
        let line = self.next_line(tag)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(malformed(self.line_no, &format!("expected `{tag}` line")));
        }
        parse_values(parts, count, self.line_no)
    }

    fn header(&mut self, tag: &str) -> Result<Vec<usize>> {
        let line = self.next_line(tag)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(tag) {
            return Err(malformed(self.line_no, &format!("expected `{tag}` header")));
        }
        parts
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| malformed(self.line_no, &format!("bad integer `{p}`")))
            })
            .collect()
    }
}

fn malformed(line: usize, msg: &str) -> Error {
    Error::MalformedFile(format!("line {line}: {msg}"))
}

fn parse_values<'a>(parts: impl Iterator<Item = &'a str>, count: usize, line: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = parts
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| malformed(line, &format!("bad number `{p}`")))
        })
        .collect::<Result<_>>()?;
    if values.len() != count {
        return Err(malformed(line, &format!("expected {count} values, found {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(malformed(line, "non-finite value"));
    }
    Ok(values)
}

pub fn read_params<R: Read>(source: R) -> Result<MlpParams> {
    let mut lines = Lines {
        inner: BufReader::new(source).lines(),
        line_no: 0,
    };
    if lines.next_line("magic")?.trim_end() != MAGIC {
        return Err(malformed(1, "bad magic"));
    }

    let spec_line = lines.next_line("spec")?;
    let fields: Vec<&str> = spec_line.split_whitespace().collect();
    if fields.len() < 6 || fields[0] != "spec" {
        return Err(malformed(lines.line_no, "expected `spec` line"));
    }
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| malformed(2, &format!("bad integer `{s}`")))
    };
    let hidden_count = int(fields[5])?;
    if fields.len() != 6 + hidden_count {
        return Err(malformed(2, "hidden layer count does not match widths"));
    }
    let dropout_rate = fields[4]
        .parse::<f64>()
        .map_err(|_| malformed(2, "bad dropout rate"))?;
    let spec = MlpSpec {
        input_dim: int(fields[1])?,
        hidden_layers: fields[6..].iter().map(|s| int(s)).collect::<Result<_>>()?,
        output_dim: int(fields[2])?,
        activation: Default::default(),
        use_batch_norm: match fields[3] {
            "0" => false,
            "1" => true,
            other => return Err(malformed(2, &format!("bad batch-norm flag `{other}`"))),
        },
        dropout_rate,
    };
    spec.validate()
        .map_err(|e| malformed(2, &e.to_string()))?;

    let mut layers = Vec::new();
    for (i, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
        let header = lines.header("layer")?;
        if header != [i, fan_out, fan_in] {
            return Err(malformed(
                lines.line_no,
                &format!("layer header {header:?} does not match spec ({i} {fan_out} {fan_in})"),
            ));
        }
        let mut w = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_out {
            let line = lines.next_line("weight row")?;
            w.extend(parse_values(line.split_whitespace(), fan_in, lines.line_no)?);
        }
        let bias = lines.tagged("bias", fan_out)?;
        layers.push(Dense {
            weight: Matrix::from_row_major(fan_out, fan_in, w)?,
            bias: Vector::new(bias),
        });
    }

    let mut norms = Vec::new();
    if spec.use_batch_norm {
        for (i, &width) in spec.hidden_layers.iter().enumerate() {
            let header = lines.header("bn")?;
            if header != [i, width] {
                return Err(malformed(lines.line_no, "batch-norm header does not match spec"));
            }
            norms.push(BatchNorm {
                running_mean: Vector::new(lines.tagged("running_mean", width)?),
                running_var: Vector::new(lines.tagged("running_var", width)?),
                scale: Vector::new(lines.tagged("scale", width)?),
                shift: Vector::new(lines.tagged("shift", width)?),
            });
        }
    }
    if lines.next_line("end")?.trim() != "end" {
        return Err(malformed(lines.line_no, "expected `end`"));
    }

    let params = MlpParams {
        spec,
        layers,
        norms,
        mode: Mode::Eval,
    };
    params
        .validate()
        .map_err(|e| Error::MalformedFile(e.to_string()))?;
    Ok(params)
}

pub fn load_params(path: &Path) -> Result<MlpParams> {
    read_params(fs::File::open(path)?)
}
