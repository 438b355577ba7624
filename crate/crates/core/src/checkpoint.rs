//! Text checkpoints.
//!
//! ```text
//! mpu-rnn-ckpt v1
//! # cell = gru
//! # hidden = 32,32
//! # input_dim = 2
//! # num_classes = 10
//! # arch = hybrid
//! # readout = last
//! # readout_matrices = split
//! # skip_input = true
//! # dropout_keep = 1
//! bank1.0.w_xz 32 2 0.125 -0.03 ...
//! ...
//! b_y 10 1 0 0 0 0 0 0 0 0 0 0
//! ```
//!
//! The first line is exactly `mpu-rnn-ckpt v1`. The `# key = value` lines
//! describe the network and must all be present. Every other non-empty line
//! is one tensor: name, rows, cols, then `rows * cols` row-major values,
//! separated by single spaces. Values use the shortest decimal form that
//! parses back to the same `f64`, so a save/load cycle is exact. Tensors
//! appear in [`NetworkParams::tensors`] order; lines end with `\n`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, NetworkParams};

pub const HEADER: &str = "mpu-rnn-ckpt v1";

const CONFIG_KEYS: [&str; 9] = [
    "cell",
    "hidden",
    "input_dim",
    "num_classes",
    "arch",
    "readout",
    "readout_matrices",
    "skip_input",
    "dropout_keep",
];

pub fn format_checkpoint(cfg: &NetworkConfig, params: &NetworkParams) -> String {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    let hidden: Vec<String> = cfg.hidden.iter().map(ToString::to_string).collect();
    let values = [
        cfg.cell.to_string(),
        hidden.join(","),
        cfg.input_dim.to_string(),
        cfg.num_classes.to_string(),
        cfg.arch.to_string(),
        cfg.readout.to_string(),
        cfg.readout_matrices.to_string(),
        cfg.skip_input.to_string(),
        cfg.dropout_keep.to_string(),
    ];
    for (k, v) in CONFIG_KEYS.iter().zip(values) {
        let _ = writeln!(out, "# {k} = {v}");
    }
    for (name, m) in params.tensors() {
        let _ = write!(out, "{name} {} {}", m.rows(), m.cols());
        for v in m.as_slice() {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

fn parse_config(pairs: &[(usize, String, String)]) -> Result<NetworkConfig> {
    let field = |key: &str| -> Result<(usize, &str)> {
        pairs
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(line, _, v)| (*line, v.as_str()))
            .ok_or_else(|| Error::Format(format!("checkpoint is missing `{key}`")))
    };
    fn num<T: std::str::FromStr>(line: usize, v: &str) -> Result<T> {
        v.parse().map_err(|_| Error::Parse {
            line,
            msg: format!("bad value `{v}`"),
        })
    }
    fn parsed<T: std::str::FromStr<Err = Error>>(line: usize, v: &str) -> Result<T> {
        v.parse().map_err(|e: Error| Error::Parse {
            line,
            msg: e.to_string(),
        })
    }

    let (line, v) = field("hidden")?;
    let hidden: Vec<usize> = v
        .split(',')
        .map(|s| num(line, s.trim()))
        .collect::<Result<_>>()?;
    let (cl, cell) = field("cell")?;
    let (il, input_dim) = field("input_dim")?;
    let (kl, classes) = field("num_classes")?;
    let mut cfg = NetworkConfig::new(
        parsed(cl, cell)?,
        hidden.len(),
        1,
        num(il, input_dim)?,
        num(kl, classes)?,
    );
    cfg.hidden = hidden;
    let (l, v) = field("arch")?;
    cfg.arch = parsed(l, v)?;
    let (l, v) = field("readout")?;
    cfg.readout = parsed(l, v)?;
    let (l, v) = field("readout_matrices")?;
    cfg.readout_matrices = parsed(l, v)?;
    let (l, v) = field("skip_input")?;
    cfg.skip_input = num(l, v)?;
    let (l, v) = field("dropout_keep")?;
    cfg.dropout_keep = num(l, v)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_checkpoint(text: &str) -> Result<(NetworkConfig, NetworkParams)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        Some((_, h)) => {
            return Err(Error::Format(format!(
                "expected header `{HEADER}`, found `{h}`"
            )))
        }
        None => return Err(Error::Format("empty checkpoint".into())),
    }
    let mut pairs = Vec::new();
    let mut tensor_lines = Vec::new();
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                let key = k.trim();
                if CONFIG_KEYS.contains(&key) {
                    pairs.push((no, key.to_string(), v.trim().to_string()));
                }
            }
            continue;
        }
        tensor_lines.push((no, line));
    }
    let cfg = parse_config(&pairs)?;
    let mut params = NetworkParams::zeros(&cfg)?;
    let expected: Vec<(String, usize, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.rows(), m.cols()))
        .collect();
    if tensor_lines.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, configuration needs {}",
            tensor_lines.len(),
            expected.len()
        )));
    }
    for ((no, line), (target, (name, rows, cols))) in tensor_lines
        .into_iter()
        .zip(params.tensors_mut().into_iter().zip(expected))
    {
        let mut fields = line.split_ascii_whitespace();
        let got = fields.next().unwrap_or_default();
        if got != name {
            return Err(Error::Parse {
                line: no,
                msg: format!("expected tensor `{name}`, found `{got}`"),
            });
        }
        let mut dim = || -> Result<usize> {
            fields
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: no,
                    msg: format!("bad shape for `{name}`"),
                })
        };
        let (r, c) = (dim()?, dim()?);
        if (r, c) != (rows, cols) {
            return Err(Error::Parse {
                line: no,
                msg: format!("`{name}` is {r}x{c}, configuration needs {rows}x{cols}"),
            });
        }
        let values: Vec<f64> = fields
            .map(|s| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    line: no,
                    msg: format!("bad number `{s}` in `{name}`"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != rows * cols {
            return Err(Error::Parse {
                line: no,
                msg: format!(
                    "`{name}` has {} values, expected {}",
                    values.len(),
                    rows * cols
                ),
            });
        }
        target.as_mut_slice().copy_from_slice(&values);
    }
    Ok((cfg, params))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &NetworkConfig,
    params: &NetworkParams,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_checkpoint(cfg, params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(NetworkConfig, NetworkParams)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::math::Rng;
    use crate::network::{init_params, Arch, Readout};

    #[test]
    fn round_trip_is_exact() {
        for cell in CellKind::ALL {
            for arch in Arch::ALL {
                let cfg = NetworkConfig::new(cell, 2, 3, 2, 4)
                    .with_arch(arch)
                    .with_readout(Readout::PerLayerWeighted)
                    .with_dropout_keep(0.6);
                let mut params = init_params(&cfg, &mut Rng::new(4)).unwrap();
                params.b_y.as_mut_slice()[0] = 1.0 / 3.0;
                let text = format_checkpoint(&cfg, &params);
                let (cfg2, params2) = parse_checkpoint(&text).unwrap();
                assert_eq!(cfg, cfg2);
                assert_eq!(params, params2);
                assert_eq!(format_checkpoint(&cfg2, &params2), text);
            }
        }
    }

    #[test]
    fn layout() {
        let cfg = NetworkConfig::new(CellKind::Gru, 1, 1, 2, 2);
        let text = format_checkpoint(&cfg, &NetworkParams::zeros(&cfg).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mpu-rnn-ckpt v1");
        assert_eq!(lines[1], "# cell = gru");
        assert_eq!(lines[10], "bank1.0.w_xz 1 2 0 0");
        assert_eq!(*lines.last().unwrap(), "b_y 2 1 0 0");
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn rejects_bad_files() {
        let cfg = NetworkConfig::new(CellKind::Mpu, 1, 2, 2, 3);
        let good = format_checkpoint(&cfg, &NetworkParams::zeros(&cfg).unwrap());
        assert!(matches!(
            parse_checkpoint("mpu-rnn-ckpt v2\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(parse_checkpoint(""), Err(Error::Format(_))));
        let no_cell = good.replace("# cell = mpu\n", "");
        assert!(matches!(parse_checkpoint(&no_cell), Err(Error::Format(_))));
        let bad_value = good.replacen("bank1.0.w_xi 2 2 0 0", "bank1.0.w_xi 2 2 0 x", 1);
        assert!(matches!(
            parse_checkpoint(&bad_value),
            Err(Error::Parse { line: 11, .. })
        ));
        let short = good.replacen("bank1.0.w_xi 2 2 0 0 0 0", "bank1.0.w_xi 2 2 0 0 0", 1);
        assert!(matches!(parse_checkpoint(&short), Err(Error::Parse { .. })));
        let wrong_shape = good.replace("# hidden = 2", "# hidden = 3");
        assert!(parse_checkpoint(&wrong_shape).is_err());
    }
}
