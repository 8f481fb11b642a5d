//! Symbol inventory. The blank symbol has no string form and always takes
//! the last index, `V`, where `V` is the number of real symbols.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::ctc::TargetSequence;
use crate::error::{Error, Result};

/// Marker used for blank in human-readable dumps. Never valid in targets.
pub const BLANK_MARKER: &str = "<blank>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlphabetSpec {
    symbols: Vec<String>,
    ignore_ids: BTreeSet<usize>,
    index: HashMap<String, usize>,
}

impl AlphabetSpec {
    /// Builds an alphabet whose ignore set is just `{blank}`.
    pub fn new<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let symbols: Vec<String> = symbols.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidAlphabet(format!("symbol {i} is empty")));
            }
            if s.chars().any(char::is_whitespace) || s.contains(',') {
                return Err(Error::InvalidAlphabet(format!(
                    "symbol {s:?} contains whitespace or a comma"
                )));
            }
            if s == BLANK_MARKER {
                return Err(Error::InvalidAlphabet(format!(
                    "{BLANK_MARKER} is reserved for blank"
                )));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::InvalidAlphabet(format!("duplicate symbol {s:?}")));
            }
        }
        let blank = symbols.len();
        Ok(Self {
            symbols,
            ignore_ids: BTreeSet::from([blank]),
            index,
        })
    }

    /// Alphabet of `n` symbols named `s0`, `s1`, ...
    pub fn numbered(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("s{i}"))).expect("generated names are valid")
    }

    /// Adds symbols to the ignore set used by spike extraction. Blank is
    /// always ignored.
    pub fn with_ignored<S: AsRef<str>>(mut self, ignored: &[S]) -> Result<Self> {
        for s in ignored {
            let id = self.lookup(s.as_ref())?;
            self.ignore_ids.insert(id);
        }
        Ok(self)
    }

    /// Reads a plain-text alphabet file, one symbol per line. Blank lines
    /// are skipped; blank itself is implicit.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for s in &self.symbols {
            text.push_str(s);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn lookup(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    /// String form of a symbol index; blank renders as [`BLANK_MARKER`].
    pub fn name(&self, id: usize) -> &str {
        self.symbols.get(id).map_or(BLANK_MARKER, String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// `V`: number of non-blank symbols.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.symbols.len()
    }

    /// `V + 1`, the width of a posterior grid.
    pub fn num_outputs(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn ignore_ids(&self) -> &BTreeSet<usize> {
        &self.ignore_ids
    }

    pub fn is_ignored(&self, id: usize) -> bool {
        self.ignore_ids.contains(&id)
    }

    /// Parses whitespace-separated symbols into a target sequence.
    pub fn parse_target(&self, text: &str) -> Result<TargetSequence> {
        let labels = text
            .split_whitespace()
            .map(|s| self.lookup(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(TargetSequence::new(labels))
    }

    pub fn format_target(&self, target: &TargetSequence) -> String {
        target
            .labels()
            .iter()
            .map(|&i| self.name(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
