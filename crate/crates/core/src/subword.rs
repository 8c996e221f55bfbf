//! Byte-level byte-pair encoding with a fixed set of special tokens.
//!
//! Text is first cut at every occurrence of the seed separator, which maps to
//! its own special id. Each remaining segment is split into chunks: a run of
//! non-space bytes followed by at most one space. The trailing space acts as
//! the end-of-word marker, so merges can learn word-final units and decoding
//! is plain concatenation. All 256 byte values are always in the vocabulary,
//! which makes every string encodable.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seeding::SEPARATOR;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SEP: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;
const FIRST_BYTE_ID: TokenId = NUM_SPECIALS as TokenId;
pub const FIRST_MERGE_ID: TokenId = FIRST_BYTE_ID + 256;

pub const DEFAULT_MERGES: usize = 8000;
const FILE_MAGIC: &str = "SEEDSMITH-BPE";
const FILE_VERSION: &str = "v1";

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];

/// Learned merge table plus the token/id maps it induces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordVocab {
    merges: Vec<(TokenId, TokenId)>,
    id_to_token: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    ranks: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl SubwordVocab {
    /// The vocabulary with no merges: specials plus the 256 byte symbols.
    pub fn byte_level() -> Self {
        let mut id_to_token: Vec<Vec<u8>> = SPECIAL_NAMES
            .iter()
            .map(|n| n.as_bytes().to_vec())
            .collect();
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], id_to_token.len() as TokenId);
            id_to_token.push(vec![b]);
        }
        SubwordVocab {
            merges: Vec::new(),
            id_to_token,
            token_to_id,
            ranks: HashMap::new(),
        }
    }

    fn push_merge(&mut self, a: TokenId, b: TokenId) -> TokenId {
        let mut bytes = self.id_to_token[a as usize].clone();
        bytes.extend_from_slice(&self.id_to_token[b as usize]);
        let id = self.id_to_token.len() as TokenId;
        self.ranks.insert((a, b), (self.merges.len(), id));
        self.merges.push((a, b));
        self.token_to_id.insert(bytes.clone(), id);
        self.id_to_token.push(bytes);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Merges as byte strings, in priority order.
    pub fn merges(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.token_bytes(a), self.token_bytes(b)))
    }

    pub fn token_bytes(&self, id: TokenId) -> &[u8] {
        &self.id_to_token[id as usize]
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    fn byte_id(b: u8) -> TokenId {
        FIRST_BYTE_ID + TokenId::from(b)
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = chunk.iter().map(|&b| Self::byte_id(b)).collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| (r.0, w[0], w[1], r.1)))
                .min_by_key(|r| r.0);
            let Some((_, a, b, merged)) = best else {
                break;
            };
            symbols = apply_merge(&symbols, a, b, merged);
        }
        out.extend_from_slice(&symbols);
    }

    /// Encodes text to ids. The separator becomes a single [`SEP`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        for (i, segment) in text.split(SEPARATOR).enumerate() {
            if i > 0 {
                out.push(SEP);
            }
            for chunk in chunks(segment.as_bytes()) {
                self.encode_chunk(chunk, &mut out);
            }
        }
        out
    }

    /// Decodes ids to text. PAD, BOS and EOS produce nothing; SEP produces
    /// the separator. Byte sequences that are not valid UTF-8 are replaced
    /// by U+FFFD.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                SEP => bytes.extend_from_slice(SEPARATOR.as_bytes()),
                UNK => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
                _ => {
                    let token = self.id_to_token.get(id as usize).ok_or_else(|| {
                        Error::data(format!("token id {id} out of range (vocab size {})", self.len()))
                    })?;
                    bytes.extend_from_slice(token);
                }
            }
        }
        Ok(String::from_utf8(bytes)
            .unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned()))
    }

    /// Serializes to the versioned text format.
    pub fn to_text(&self) -> String {
        let mut s = format!("{FILE_MAGIC} {FILE_VERSION} {}\n", self.merges.len());
        for (a, b) in self.merges() {
            let _ = writeln!(s, "{} {}", escape(a), escape(b));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format("empty vocab file"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 3 || fields[0] != FILE_MAGIC {
            return Err(Error::format(format!("bad vocab header {header:?}")));
        }
        if fields[1] != FILE_VERSION {
            return Err(Error::format(format!("unsupported vocab version {}", fields[1])));
        }
        let declared: usize = fields[2]
            .parse()
            .map_err(|_| Error::format(format!("bad merge count {:?}", fields[2])))?;
        let mut vocab = Self::byte_level();
        for (n, line) in lines.enumerate() {
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::format(format!("merge line {}: expected two symbols", n + 2)))?;
            let lookup = |sym: &str| -> Result<TokenId> {
                let bytes = unescape(sym)
                    .ok_or_else(|| Error::format(format!("merge line {}: bad escape in {sym:?}", n + 2)))?;
                vocab.id_of(&bytes).ok_or_else(|| {
                    Error::format(format!("merge line {}: unknown symbol {sym:?}", n + 2))
                })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            if vocab.ranks.contains_key(&(ia, ib)) {
                return Err(Error::format(format!("merge line {}: duplicate merge", n + 2)));
            }
            vocab.push_merge(ia, ib);
        }
        if vocab.merges.len() != declared {
            return Err(Error::format(format!(
                "header declares {declared} merges, file has {}",
                vocab.merges.len()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read vocab {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

/// Splits a segment into chunks of non-space bytes plus one optional
/// trailing space.
fn chunks(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    let mut pos = 0;
    std::iter::from_fn(move || {
        if pos >= bytes.len() {
            return None;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos] != b' ' {
            pos += 1;
        }
        if pos < bytes.len() {
            pos += 1;
        }
        Some(&bytes[start..pos])
    })
}

fn apply_merge(symbols: &[TokenId], a: TokenId, b: TokenId, merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x21..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn unescape(s: &str) -> Option<Vec<u8>> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            match bytes.get(i + 1)? {
                b'\\' => {
                    out.push(b'\\');
                    i += 2;
                }
                b'x' => {
                    let hex = std::str::from_utf8(bytes.get(i + 2..i + 4)?).ok()?;
                    out.push(u8::from_str_radix(hex, 16).ok()?);
                    i += 4;
                }
                _ => return None,
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    a: Vec<u8>,
    b: Vec<u8>,
    ids: (TokenId, TokenId),
}

impl Ord for Candidate {
    // Highest count first; among equal counts the lexicographically smallest
    // pair wins.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| (&other.a, &other.b).cmp(&(&self.a, &self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns up to `num_merges` merges from the corpus lines. Training stops
/// early once no adjacent pair occurs at least twice.
pub fn train_bpe<'a, I>(corpus: I, num_merges: usize) -> Result<SubwordVocab>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut word_counts: HashMap<&[u8], i64> = HashMap::new();
    let mut lines = 0usize;
    for line in corpus {
        lines += 1;
        for segment in line.split(SEPARATOR) {
            for chunk in chunks(segment.as_bytes()) {
                *word_counts.entry(chunk).or_default() += 1;
            }
        }
    }
    if lines == 0 {
        return Err(Error::input("cannot train BPE on an empty corpus"));
    }

    let mut vocab = SubwordVocab::byte_level();
    let mut sorted: Vec<(&[u8], i64)> = word_counts.into_iter().collect();
    sorted.sort();
    let mut words: Vec<(Vec<TokenId>, i64)> = sorted
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| SubwordVocab::byte_id(b)).collect(), c))
        .collect();

    let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut pair_words: HashMap<(TokenId, TokenId), Vec<usize>> = HashMap::new();
    for (wi, (symbols, count)) in words.iter().enumerate() {
        for w in symbols.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += count;
            pair_words.entry((w[0], w[1])).or_default().push(wi);
        }
    }

    let candidate = |vocab: &SubwordVocab, pair: (TokenId, TokenId), count: i64| Candidate {
        count,
        a: vocab.token_bytes(pair.0).to_vec(),
        b: vocab.token_bytes(pair.1).to_vec(),
        ids: pair,
    };
    let mut heap: BinaryHeap<Candidate> = pair_counts
        .iter()
        .map(|(&p, &c)| candidate(&vocab, p, c))
        .collect();

    while vocab.num_merges() < num_merges {
        let Some(top) = heap.pop() else { break };
        if pair_counts.get(&top.ids).copied() != Some(top.count) {
            continue;
        }
        if top.count < 2 {
            break;
        }
        let (a, b) = top.ids;
        let merged = vocab.push_merge(a, b);

        let mut affected = pair_words.remove(&top.ids).unwrap_or_default();
        affected.sort_unstable();
        affected.dedup();
        let mut touched: HashSet<(TokenId, TokenId)> = HashSet::new();
        for wi in affected {
            let (symbols, count) = &mut words[wi];
            if !symbols.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.get_mut(&p).expect("pair tracked") -= *count;
                touched.insert(p);
            }
            *symbols = apply_merge(symbols, a, b, merged);
            for w in symbols.windows(2) {
                let p = (w[0], w[1]);
                *pair_counts.entry(p).or_default() += *count;
                pair_words.entry(p).or_default().push(wi);
                touched.insert(p);
            }
        }
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            let c = pair_counts[&p];
            if c > 0 {
                heap.push(candidate(&vocab, p, c));
            }
        }
    }
    Ok(vocab)
}
