//! Binary checkpoint container.
//!
//! Layout: one text header line `RAIL <kind> v1 key=value ...\n`, then a
//! payload of little-endian values. Header values never contain spaces.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};
use crate::nn::mlp::{Activation, Mlp};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Header {
    pub kind: String,
    pub fields: Vec<(String, String)>,
}

impl Header {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.fields.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::MalformedHeader(format!("missing key `{key}` in {} header", self.kind)))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::MalformedHeader(format!("bad value `{raw}` for `{key}`")))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut line = format!("RAIL {} v1", self.kind);
        for (k, v) in &self.fields {
            if v.contains(char::is_whitespace) || k.contains(char::is_whitespace) {
                return Err(Error::MalformedHeader(format!("whitespace in header entry {k}={v}")));
            }
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(v);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        let n = r.read_line(&mut line)?;
        if n == 0 || !line.ends_with('\n') {
            return Err(Error::MalformedHeader("missing header line".into()));
        }
        let mut parts = line.trim_end().split(' ');
        if parts.next() != Some("RAIL") {
            return Err(Error::MalformedHeader("missing RAIL magic".into()));
        }
        let kind = parts
            .next()
            .ok_or_else(|| Error::MalformedHeader("missing kind".into()))?
            .to_string();
        if parts.next() != Some("v1") {
            return Err(Error::MalformedHeader("unsupported version".into()));
        }
        let mut header = Header::new(&kind);
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::MalformedHeader(format!("entry `{p}` is not key=value")))?;
            header.fields.push((k.to_string(), v.to_string()));
        }
        Ok(header)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::MalformedHeader(format!("expected `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }
}

pub fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads exactly `n` values; a short read reports the missing byte count.
pub fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let want = n * 8;
    let mut buf = Vec::with_capacity(want);
    r.take(want as u64).read_to_end(&mut buf)?;
    if buf.len() < want {
        return Err(Error::Truncated {
            missing: (want - buf.len()) as u64,
        });
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        let n = r.read(&mut b[got..])?;
        if n == 0 {
            return Err(Error::Truncated {
                missing: (8 - got) as u64,
            });
        }
        got += n;
    }
    Ok(u64::from_le_bytes(b))
}

pub fn expect_eof(r: &mut impl Read) -> Result<()> {
    let mut extra = Vec::new();
    r.read_to_end(&mut extra)?;
    if extra.is_empty() {
        Ok(())
    } else {
        Err(Error::MalformedHeader(format!("{} trailing bytes after payload", extra.len())))
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Adds the network shape manifest to `header`.
pub fn describe_mlp(header: &mut Header, net: &Mlp) {
    header.set("dims", join(net.dims()));
    header.set("acts", join(net.activations().iter().map(|a| a.tag())));
}

pub fn write_mlp(w: &mut impl Write, header: &Header, net: &Mlp) -> Result<()> {
    let mut header = header.clone();
    describe_mlp(&mut header, net);
    header.write_to(w)?;
    write_f64s(w, net.params())
}

/// Reads the parameters of the network described by `header`.
pub fn read_mlp_payload(header: &Header, r: &mut impl Read) -> Result<Mlp> {
    let dims: Vec<usize> = header
        .require("dims")?
        .split(',')
        .map(|d| d.parse().map_err(|_| Error::MalformedHeader(format!("bad dim `{d}`"))))
        .collect::<Result<_>>()?;
    let acts: Vec<Activation> = header
        .require("acts")?
        .split(',')
        .map(|a| Activation::from_tag(a).ok_or_else(|| Error::MalformedHeader(format!("unknown activation `{a}`"))))
        .collect::<Result<_>>()?;
    let shape = Mlp::zeros(&dims, Activation::Identity)?;
    let params = read_f64s(r, shape.num_params())?;
    Mlp::from_parts(&dims, acts, params)
}

pub fn read_mlp(r: &mut impl BufRead) -> Result<(Header, Mlp)> {
    let header = Header::read_from(r)?;
    let net = read_mlp_payload(&header, r)?;
    expect_eof(r)?;
    Ok((header, net))
}
