//! Text form of architectures.
//!
//! ```text
//! # comments run to the end of the line
//! input 28 28 1
//! F(8,8,2,2) / G(25) / F(11,11,1,1) / G(36)
//! ```
//!
//! Terms are separated by `/` or newlines. `input H W C` is optional and
//! defaults to `28 28 1`. Pooling accepts `P(k,stride)` as a square shorthand.

use crate::arch::{ArchitectureConfig, LayerSpec};
use crate::error::{Error, Result};
use crate::layers::{FoldingParams, PoolingParams};
use crate::tensor::Dims;

struct Cursor {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    column: usize,
}

impl Cursor {
    fn new(src: &str) -> Self {
        Cursor {
            chars: src.chars().collect(),
            pos: 0,
            line: 1,
            column: 1,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.column = 1;
        } else {
            self.column += 1;
        }
        Some(c)
    }

    fn error(&self, reason: impl Into<String>) -> Error {
        Error::Syntax {
            line: self.line,
            column: self.column,
            reason: reason.into(),
        }
    }

    /// Skips spaces, tabs and comments but stops at newlines.
    fn skip_inline(&mut self) {
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\r' => {
                    self.bump();
                }
                '#' => {
                    while !matches!(self.peek(), None | Some('\n')) {
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    /// Skips whitespace, comments, newlines and `/` separators.
    fn skip_separators(&mut self) {
        loop {
            self.skip_inline();
            match self.peek() {
                Some('\n') | Some('/') => {
                    self.bump();
                }
                _ => break,
            }
        }
    }

    fn word(&mut self) -> String {
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_alphabetic() {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        s
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_inline();
        let start = (self.line, self.column);
        let mut s = String::new();
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        if s.is_empty() {
            return Err(self.error("expected an unsigned integer"));
        }
        s.parse().map_err(|_| Error::Syntax {
            line: start.0,
            column: start.1,
            reason: format!("integer {s} is out of range"),
        })
    }

    fn expect(&mut self, want: char) -> Result<()> {
        self.skip_inline();
        match self.peek() {
            Some(c) if c == want => {
                self.bump();
                Ok(())
            }
            Some(c) => Err(self.error(format!("expected '{want}', found '{c}'"))),
            None => Err(self.error(format!("expected '{want}', found end of input"))),
        }
    }

    fn arguments(&mut self) -> Result<Vec<usize>> {
        self.expect('(')?;
        let mut args = vec![self.number()?];
        loop {
            self.skip_inline();
            match self.peek() {
                Some(',') => {
                    self.bump();
                    args.push(self.number()?);
                }
                Some(')') => {
                    self.bump();
                    return Ok(args);
                }
                Some(c) => return Err(self.error(format!("expected ',' or ')', found '{c}'"))),
                None => return Err(self.error("unterminated argument list")),
            }
        }
    }
}

fn arity(args: &[usize], allowed: &[usize], name: &str, at: (usize, usize)) -> Result<()> {
    if allowed.contains(&args.len()) {
        return Ok(());
    }
    Err(Error::Syntax {
        line: at.0,
        column: at.1,
        reason: format!("{name} takes {allowed:?} arguments, got {}", args.len()),
    })
}

/// Parses and validates an architecture, running shape propagation.
pub fn parse_architecture(text: &str) -> Result<ArchitectureConfig> {
    let mut cur = Cursor::new(text);
    let mut input = None;
    let mut layers = Vec::new();
    loop {
        cur.skip_separators();
        if cur.peek().is_none() {
            break;
        }
        let at = (cur.line, cur.column);
        let name = cur.word();
        let layer_at = |e: Error| match e {
            Error::Config(reason) => Error::LayerConfig {
                layer: layers.len() + 1,
                reason,
            },
            other => other,
        };
        match name.as_str() {
            "input" => {
                if input.is_some() || !layers.is_empty() {
                    return Err(Error::Syntax {
                        line: at.0,
                        column: at.1,
                        reason: "'input' must appear once, before any layer".into(),
                    });
                }
                let h = cur.number()?;
                let w = cur.number()?;
                let c = cur.number()?;
                input = Some(Dims::new(1, h, w, c));
            }
            "F" => {
                let a = cur.arguments()?;
                arity(&a, &[4], "F", at)?;
                let p = FoldingParams::new(a[0], a[1], a[2], a[3]).map_err(layer_at)?;
                layers.push(LayerSpec::Folding(p));
            }
            "P" => {
                let a = cur.arguments()?;
                arity(&a, &[2, 4], "P", at)?;
                let (ky, kx, dy, dx) = if a.len() == 2 {
                    (a[0], a[0], a[1], a[1])
                } else {
                    (a[0], a[1], a[2], a[3])
                };
                let p = PoolingParams::new(ky, kx, dy, dx).map_err(layer_at)?;
                layers.push(LayerSpec::Pooling(p));
            }
            "G" => {
                let a = cur.arguments()?;
                arity(&a, &[1], "G", at)?;
                layers.push(LayerSpec::Gmm { k: a[0] });
            }
            "C" => {
                let a = cur.arguments()?;
                arity(&a, &[1], "C", at)?;
                layers.push(LayerSpec::Classifier { classes: a[0] });
            }
            "" => {
                let c = cur.peek().unwrap_or(' ');
                return Err(cur.error(format!("unexpected character '{c}'")));
            }
            other => {
                return Err(Error::Syntax {
                    line: at.0,
                    column: at.1,
                    reason: format!("unknown term '{other}'"),
                })
            }
        }
        cur.skip_inline();
        match cur.peek() {
            None | Some('\n') | Some('/') => {}
            Some(c) => return Err(cur.error(format!("expected '/' or newline, found '{c}'"))),
        }
    }
    let input = input.unwrap_or(Dims::new(1, 28, 28, 1));
    let arch = ArchitectureConfig { input, layers };
    arch.validate()?;
    Ok(arch)
}
