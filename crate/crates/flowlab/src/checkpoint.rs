//! Checkpoint encode/decode: a text manifest (format version, step, config
//! echo with content hash, RNG stream states, array shapes) followed by the
//! raw little-endian f64 arrays in manifest order.
//!
//! Round trips are byte-identical: decode(encode(ck)) == ck and
//! encode(decode(bytes)) == bytes, which is what makes resumed runs
//! reproducible bit for bit. Optimizer moments are part of the payload for
//! the same reason; without them a resumed Adam step would diverge from the
//! uninterrupted run.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arr::{Arr, Shape};
use crate::config::{ConfigError, TrainConfig};
use crate::net::{EmaParams, ModelParams};

const MAGIC: &str = "flowck 1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("unsupported checkpoint format `{found}`")]
    Version { found: String },
    #[error("config echo does not match its recorded hash")]
    ConfigHash,
    #[error("embedded config: {0}")]
    Config(#[from] ConfigError),
    #[error("array `{name}`: {detail}")]
    Shape { name: String, detail: String },
    #[error("payload: {detail}")]
    Payload { detail: String },
}

/// Enough of a ChaCha generator to rebuild it exactly: the 256-bit seed,
/// the stream index and the word position within the stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamState {
    pub name: String,
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl StreamState {
    pub fn capture(name: &str, rng: &ChaCha8Rng) -> StreamState {
        assert!(
            !name.is_empty() && name.chars().all(|c| !c.is_whitespace()),
            "stream names must be single tokens"
        );
        StreamState {
            name: name.to_string(),
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Config text exactly as stored in the file; the hash is over these
    /// bytes, so they survive round trips untouched.
    pub config_text: String,
    pub config: TrainConfig,
    pub step: usize,
    pub streams: Vec<StreamState>,
    pub live: ModelParams,
    pub ema: EmaParams,
    /// Adam first/second moments, aligned with `live.arrays()`.
    pub adam_m: Vec<Arr>,
    pub adam_v: Vec<Arr>,
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        step: usize,
        streams: Vec<StreamState>,
        live: ModelParams,
        ema: EmaParams,
        adam_m: Vec<Arr>,
        adam_v: Vec<Arr>,
    ) -> Checkpoint {
        Checkpoint {
            config_text: config.to_canonical_string(),
            config: config.clone(),
            step,
            streams,
            live,
            ema,
            adam_m,
            adam_v,
        }
    }

    pub fn stream(&self, name: &str) -> Option<&StreamState> {
        self.streams.iter().find(|s| s.name == name)
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn unhex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    // Lowercase only, so any accepted manifest re-encodes byte-identically.
    let digit = |b: u8| match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        _ => None,
    };
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        out[i] = digit(chunk[0])? * 16 + digit(chunk[1])?;
    }
    Some(out)
}

/// Canonical decimal only: pure digits, no sign, no leading zeros. Keeps
/// decode(bytes) ∘ encode the identity on everything decode accepts.
fn canonical_decimal<T: std::str::FromStr>(s: &str) -> Option<T> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if s.len() > 1 && s.starts_with('0') {
        return None;
    }
    s.parse().ok()
}

fn config_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

/// The (name, shape) sequence a checkpoint for `config` must carry, in
/// payload order: live params, EMA shadow, Adam first and second moments.
fn expected_arrays(config: &TrainConfig) -> Vec<(String, Shape)> {
    let net = config.net_config();
    let names = ModelParams::array_names(&net);
    // A zero-init template gives the authoritative shapes without touching
    // any RNG.
    let template = ModelParams::init(net, 0);
    let shapes: Vec<Shape> = template.arrays().iter().map(|a| *a.shape()).collect();
    let mut out = Vec::new();
    for prefix in ["live", "ema", "adam_m", "adam_v"] {
        for (name, shape) in names.iter().zip(&shapes) {
            out.push((format!("{prefix}.{name}"), *shape));
        }
    }
    out
}

fn shape_words(shape: &Shape) -> String {
    match shape {
        Shape::Scalar => "0".to_string(),
        Shape::Vector(n) => format!("1 {n}"),
        Shape::Matrix(r, c) => format!("2 {r} {c}"),
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut head = String::new();
    let _ = writeln!(head, "{MAGIC}");
    let _ = writeln!(head, "step {}", ck.step);
    let _ = writeln!(head, "config_sha256 {}", config_hash(&ck.config_text));
    let _ = writeln!(head, "config_len {}", ck.config_text.len());
    head.push_str(&ck.config_text);
    let _ = writeln!(head);
    let _ = writeln!(head, "streams {}", ck.streams.len());
    for s in &ck.streams {
        let _ = writeln!(head, "stream {} {} {} {}", s.name, hex(&s.seed), s.stream, s.word_pos);
    }
    let arrays: Vec<&Arr> = ck
        .live
        .arrays()
        .into_iter()
        .chain(ck.ema.params.arrays())
        .chain(ck.adam_m.iter())
        .chain(ck.adam_v.iter())
        .collect();
    let names = expected_arrays(&ck.config);
    assert_eq!(names.len(), arrays.len(), "param containers out of sync with config");
    let _ = writeln!(head, "arrays {}", arrays.len());
    for ((name, shape), arr) in names.iter().zip(&arrays) {
        assert_eq!(shape, arr.shape(), "array {name} has an unexpected shape");
        let _ = writeln!(head, "array {} {}", name, shape_words(shape));
    }
    let _ = writeln!(head, "payload");
    let mut out = head.into_bytes();
    for arr in arrays {
        for v in arr.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, detail: impl Into<String>) -> CheckpointError {
        CheckpointError::Manifest { line: self.line, detail: detail.into() }
    }

    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        self.line += 1;
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unexpected end of manifest"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| self.err("manifest is not valid UTF-8"))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("expected {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn parse_count(cur: &Cursor, line: &str, keyword: &str) -> Result<usize, CheckpointError> {
    let rest = line
        .strip_prefix(keyword)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| cur.err(format!("expected `{keyword} <n>`, got `{line}`")))?;
    canonical_decimal(rest).ok_or_else(|| cur.err(format!("bad count in `{line}`")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0, line: 0 };

    let magic = cur.line()?;
    if magic != MAGIC {
        return Err(CheckpointError::Version { found: magic.chars().take(32).collect() });
    }
    let line = cur.line()?;
    let step = parse_count(&cur, line, "step")?;

    let hash_line = cur.line()?;
    let stored_hash = hash_line
        .strip_prefix("config_sha256 ")
        .ok_or_else(|| cur.err(format!("expected `config_sha256 <hex>`, got `{hash_line}`")))?
        .to_string();
    let line = cur.line()?;
    let config_len = parse_count(&cur, line, "config_len")?;
    let config_bytes = cur.take(config_len)?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| cur.err("config echo is not valid UTF-8"))?
        .to_string();
    if cur.take(1)? != b"\n" {
        return Err(cur.err("config echo must end with a newline"));
    }
    if config_hash(&config_text) != stored_hash {
        return Err(CheckpointError::ConfigHash);
    }
    let config = TrainConfig::parse(&config_text)?;

    let line = cur.line()?;
    let n_streams = parse_count(&cur, line, "streams")?;
    if n_streams > 64 {
        return Err(cur.err("implausible stream count"));
    }
    let mut streams = Vec::with_capacity(n_streams);
    for _ in 0..n_streams {
        let line = cur.line()?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 5 || fields[0] != "stream" {
            return Err(cur.err(format!("expected `stream <name> <seed> <stream> <pos>`, got `{line}`")));
        }
        let seed =
            unhex32(fields[2]).ok_or_else(|| cur.err("seed must be 64 hex characters"))?;
        let stream =
            canonical_decimal(fields[3]).ok_or_else(|| cur.err("bad stream index"))?;
        let word_pos =
            canonical_decimal(fields[4]).ok_or_else(|| cur.err("bad word position"))?;
        if streams.iter().any(|s: &StreamState| s.name == fields[1]) {
            return Err(cur.err(format!("stream `{}` listed twice", fields[1])));
        }
        streams.push(StreamState { name: fields[1].to_string(), seed, stream, word_pos });
    }

    let expected = expected_arrays(&config);
    let line = cur.line()?;
    let n_arrays = parse_count(&cur, line, "arrays")?;
    if n_arrays != expected.len() {
        return Err(cur.err(format!(
            "config implies {} arrays, manifest lists {n_arrays}",
            expected.len()
        )));
    }
    for (name, shape) in &expected {
        let line = cur.line()?;
        let want = format!("array {} {}", name, shape_words(shape));
        if line != want {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                detail: format!("expected `{want}`, got `{line}`"),
            });
        }
    }
    let line = cur.line()?;
    if line != "payload" {
        return Err(cur.err(format!("expected `payload`, got `{line}`")));
    }

    let total: usize = expected.iter().map(|(_, s)| s.len()).sum();
    let body = &bytes[cur.pos..];
    if body.len() != total * 8 {
        return Err(CheckpointError::Payload {
            detail: format!("expected {} bytes of array data, found {}", total * 8, body.len()),
        });
    }
    let mut values = Vec::with_capacity(total);
    for chunk in body.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(CheckpointError::Payload {
                detail: "non-finite value in array data".to_string(),
            });
        }
        values.push(v);
    }

    let mut offset = 0;
    let mut read_arr = |shape: &Shape| {
        let n = shape.len();
        let data = values[offset..offset + n].to_vec();
        offset += n;
        match shape {
            Shape::Scalar => Arr::scalar(data[0]),
            Shape::Vector(_) => Arr::vector(data),
            Shape::Matrix(r, c) => Arr::matrix(*r, *c, data),
        }
    };
    let net = config.net_config();
    let per_set = expected.len() / 4;
    let mut fill = |shapes: &[(String, Shape)]| {
        let mut params = ModelParams::init(net.clone(), 0);
        for (slot, (_, shape)) in params.arrays_mut().into_iter().zip(shapes) {
            *slot = read_arr(shape);
        }
        params
    };
    let live = fill(&expected[..per_set]);
    let ema_params = fill(&expected[per_set..2 * per_set]);
    let adam_m: Vec<Arr> =
        expected[2 * per_set..3 * per_set].iter().map(|(_, s)| read_arr(s)).collect();
    let adam_v: Vec<Arr> =
        expected[3 * per_set..].iter().map(|(_, s)| read_arr(s)).collect();

    Ok(Checkpoint {
        config_text,
        step,
        streams,
        live,
        ema: EmaParams { decay: config.ema_decay, params: ema_params },
        adam_m,
        adam_v,
        config,
    })
}

/// Atomic save: write to a temp file in the same directory, then rename.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = encode(ck);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.preset = "gauss1".into();
        cfg.hidden_width = 8;
        cfg.hidden_layers = 2;
        cfg.embed_dim = 4;
        cfg.label_embed_dim = 3;
        cfg.steps = 7;
        cfg.validate().unwrap();
        cfg
    }

    fn sample_checkpoint() -> Checkpoint {
        let cfg = small_config();
        let live = ModelParams::init(cfg.net_config(), 11);
        let mut ema = EmaParams::new(&live, cfg.ema_decay);
        let other = ModelParams::init(cfg.net_config(), 12);
        ema.update(&other, 10_000);
        let adam_m: Vec<Arr> =
            live.arrays().iter().map(|a| a.map(|v| v * 0.25 - 1.0)).collect();
        let adam_v: Vec<Arr> = live.arrays().iter().map(|a| a.map(|v| v * v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(3);
        for _ in 0..17 {
            let _: f64 = rng.gen();
        }
        let streams =
            vec![StreamState::capture("data", &rng), StreamState::capture("noise", &rng)];
        Checkpoint::new(&cfg, 7, streams, live, ema, adam_m, adam_v)
    }

    #[test]
    fn decode_inverts_encode() {
        let ck = sample_checkpoint();
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        // Byte-level idempotence, the stronger property.
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.flowck");
        let p2 = dir.path().join("b.flowck");
        let ck = sample_checkpoint();
        save(&p1, &ck).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert!(!p1.with_extension("tmp").exists(), "temp file must not survive");
    }

    #[test]
    fn stream_state_restores_generator_mid_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        rng.set_stream(4);
        for _ in 0..7 {
            let _: f64 = rng.gen();
        }
        let state = StreamState::capture("x", &rng);
        let ahead: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
        let mut restored = state.restore();
        let replay: Vec<f64> = (0..5).map(|_| restored.gen()).collect();
        assert_eq!(ahead, replay);
    }

    #[test]
    fn tampered_config_is_rejected() {
        let ck = sample_checkpoint();
        let mut bytes = encode(&ck);
        // Same-length edit inside the config echo so only the hash trips.
        let pos = bytes
            .windows(12)
            .position(|w| w == b"lambda = 0.7")
            .expect("config echo present");
        bytes[pos + 9] = b'0';
        bytes[pos + 11] = b'9';
        assert!(matches!(decode(&bytes), Err(CheckpointError::ConfigHash)));
    }

    #[test]
    fn wrong_magic_truncation_and_trailing_bytes_are_rejected() {
        let ck = sample_checkpoint();
        let bytes = encode(&ck);

        let mut wrong = bytes.clone();
        wrong[7] = b'9';
        assert!(matches!(decode(&wrong), Err(CheckpointError::Version { .. })));

        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..40]).is_err());
        assert!(decode(b"").is_err());

        let mut padded = bytes.clone();
        padded.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode(&padded), Err(CheckpointError::Payload { .. })));
    }

    #[test]
    fn shape_drift_is_rejected() {
        let ck = sample_checkpoint();
        let bytes = encode(&ck);
        let text_end = bytes.windows(8).position(|w| w == b"payload\n").unwrap() + 8;
        let head = String::from_utf8(bytes[..text_end].to_vec()).unwrap();
        // Claim a different width for the first weight matrix.
        let drifted = head.replace("array live.w0 2 ", "array live.w0 3 ");
        let mut evil = drifted.into_bytes();
        evil.extend_from_slice(&bytes[text_end..]);
        assert!(matches!(decode(&evil), Err(CheckpointError::Shape { .. })));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let ck = sample_checkpoint();
        let mut bytes = encode(&ck);
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CheckpointError::Payload { .. })));
    }

    #[test]
    fn garbage_inputs_error_without_panicking() {
        for junk in [
            &b"flowck 1\nstep zero\n"[..],
            &b"flowck 1\nstep 3\nconfig_sha256 xyz\nconfig_len 4\nabcd\n"[..],
            &b"\xff\xfe\x00"[..],
            &b"flowck 1\nstep 1\nconfig_sha256 00\nconfig_len 999999\n"[..],
        ] {
            assert!(decode(junk).is_err());
        }
    }

    // Non-canonical numerals and hex would decode to a checkpoint whose
    // re-encoding differs from the input; rejecting them keeps decode a
    // partial inverse of encode on its whole accepted domain.
    #[test]
    fn non_canonical_numerals_are_rejected() {
        let ck = sample_checkpoint();
        let good = encode(&ck);
        assert!(decode(&good).is_ok());
        let text = String::from_utf8_lossy(&good).into_owned();

        let cases = [
            ("step 7", "step 07"),
            ("step 7", "step +7"),
            ("streams 2", "streams 02"),
        ];
        for (from, to) in cases {
            let bad = text.replacen(from, to, 1).into_bytes();
            assert!(decode(&bad).is_err(), "`{to}` must be rejected");
        }

        // Uppercase stream seed hex.
        let seed_hex = hex(&ck.streams[0].seed);
        let upper = seed_hex.to_uppercase();
        if upper != seed_hex {
            let bad = text.replacen(&seed_hex, &upper, 1).into_bytes();
            assert!(decode(&bad).is_err(), "uppercase seed hex must be rejected");
        }
    }
}
