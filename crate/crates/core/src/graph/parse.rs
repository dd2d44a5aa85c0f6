use std::str::FromStr;

use super::module::{Activation, Module};
use crate::error::{Error, Result};

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation `{other}`"
            ))),
        }
    }
}

/// Parses the architecture grammar:
///
/// ```text
/// module := linear(i,o) | bias(d) | relu(d) | tanh(d) | identity(d)
///         | seq(module, ...) | par(module, ...) | mlp(act, d0, d1, ..., dk)
/// ```
///
/// Everything `Display` prints parses back to the same module.
impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut p = Parser { src: s, pos: 0 };
        let m = p.module()?;
        p.skip_ws();
        if p.pos != s.len() {
            return Err(p.error("trailing input"));
        }
        Ok(m)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

enum Arg {
    Module(Module),
    Number(usize),
    Word(String),
}

impl Parser<'_> {
    fn error(&self, what: &str) -> Error {
        Error::InvalidArgument(format!(
            "architecture: {what} at offset {} in `{}`",
            self.pos, self.src
        ))
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.src[self.pos..]
                .chars()
                .next()
                .map_or(1, char::len_utf8);
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn token(&mut self, pred: fn(char) -> bool) -> &str {
        self.skip_ws();
        let start = self.pos;
        let len = self.src[start..]
            .find(|c: char| !pred(c))
            .unwrap_or(self.src.len() - start);
        self.pos += len;
        &self.src[start..self.pos]
    }

    fn arg(&mut self) -> Result<Arg> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(|c: char| c.is_ascii_digit()) {
            let digits = self.token(|c| c.is_ascii_digit());
            return digits.parse().map(Arg::Number).map_err(|_| {
                Error::InvalidArgument(format!("architecture: bad number `{digits}`"))
            });
        }
        let save = self.pos;
        let word = self
            .token(|c| c.is_ascii_alphanumeric() || c == '_')
            .to_string();
        if word.is_empty() {
            return Err(self.error("expected a module, number or word"));
        }
        if self.eat('(') {
            self.pos = save;
            return self.module().map(Arg::Module);
        }
        Ok(Arg::Word(word))
    }

    fn module(&mut self) -> Result<Module> {
        let name = self
            .token(|c| c.is_ascii_alphanumeric() || c == '_')
            .to_string();
        if name.is_empty() {
            return Err(self.error("expected a module name"));
        }
        if !self.eat('(') {
            return Err(self.error("expected `(`"));
        }
        let mut args = Vec::new();
        if !self.eat(')') {
            loop {
                args.push(self.arg()?);
                if self.eat(')') {
                    break;
                }
                if !self.eat(',') {
                    return Err(self.error("expected `,` or `)`"));
                }
            }
        }
        build(&name, args)
    }
}

fn numbers(name: &str, args: &[Arg]) -> Result<Vec<usize>> {
    args.iter()
        .map(|a| match a {
            Arg::Number(n) if *n > 0 => Ok(*n),
            _ => Err(Error::InvalidArgument(format!(
                "`{name}` takes positive dimensions"
            ))),
        })
        .collect()
}

fn build(name: &str, args: Vec<Arg>) -> Result<Module> {
    let arity = |k: usize| -> Result<Vec<usize>> {
        let dims = numbers(name, &args)?;
        if dims.len() != k {
            return Err(Error::InvalidArgument(format!(
                "`{name}` takes {k} dimension(s)"
            )));
        }
        Ok(dims)
    };
    match name {
        "linear" => {
            let d = arity(2)?;
            Ok(Module::linear(d[0], d[1]))
        }
        "bias" => Ok(Module::bias(arity(1)?[0])),
        "relu" | "tanh" | "identity" => Ok(Module::pointwise(name.parse()?, arity(1)?[0])),
        "seq" | "par" => {
            let children = args
                .into_iter()
                .map(|a| match a {
                    Arg::Module(m) => Ok(m),
                    _ => Err(Error::InvalidArgument(format!("`{name}` takes modules"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if name == "seq" {
                Module::sequential(children)
            } else {
                Module::parallel(children)
            }
        }
        "mlp" => {
            let mut it = args.into_iter();
            let act = match it.next() {
                Some(Arg::Word(w)) => w.parse()?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "`mlp` starts with an activation".into(),
                    ))
                }
            };
            let rest: Vec<Arg> = it.collect();
            Module::mlp(&numbers(name, &rest)?, act)
        }
        other => Err(Error::InvalidArgument(format!("unknown module `{other}`"))),
    }
}
