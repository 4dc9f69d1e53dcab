//! Word-piece alignment labels from word-level forced alignments.

use serde::{Deserialize, Serialize};

use crate::band::AlignLabels;
use crate::error::{Error, Result};

/// Marker text for silence entries.
pub const SIL: &str = "SIL";

/// Default acoustic-to-encoder frame divisor (two 2x time reductions).
pub const DEFAULT_SUBSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
    #[serde(default)]
    pub pieces: Vec<usize>,
}

impl WordSpan {
    pub fn new(text: impl Into<String>, start: usize, end: usize, pieces: Vec<usize>) -> Self {
        Self { text: text.into(), start, end, pieces }
    }

    pub fn silence(start: usize, end: usize) -> Self {
        Self::new(SIL, start, end, Vec::new())
    }

    pub fn is_silence(&self) -> bool {
        self.text == SIL
    }
}

/// Ordered word spans of one utterance, silence included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordAlignment {
    pub words: Vec<WordSpan>,
}

/// Piece-labeling rule applied within each word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every piece takes the word end frame.
    As1,
    /// Pieces split the word interval evenly; the last lands on the end frame.
    As2,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "as1" => Ok(Strategy::As1),
            "as2" => Ok(Strategy::As2),
            other => Err(Error::InvalidArgument(format!("unknown strategy {other:?}"))),
        }
    }
}

impl WordAlignment {
    pub fn new(words: Vec<WordSpan>) -> Result<Self> {
        let a = Self { words };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev_end: Option<usize> = None;
        for (j, w) in self.words.iter().enumerate() {
            if w.start > w.end {
                return Err(Error::InvalidAlignment(format!(
                    "word {j} ({:?}) starts at {} after its end {}",
                    w.text, w.start, w.end
                )));
            }
            if let Some(p) = prev_end {
                if w.start < p {
                    return Err(Error::InvalidAlignment(format!(
                        "word {j} ({:?}) starts at {} before the previous end {p}",
                        w.text, w.start
                    )));
                }
            }
            if w.is_silence() && !w.pieces.is_empty() {
                return Err(Error::InvalidAlignment(format!("silence entry {j} carries pieces")));
            }
            if !w.is_silence() && w.pieces.is_empty() {
                return Err(Error::EmptyWordPieces(j, w.text.clone()));
            }
            prev_end = Some(w.end);
        }
        Ok(())
    }

    /// Concatenated word pieces, silence skipped.
    pub fn tokens(&self) -> Vec<usize> {
        self.words.iter().flat_map(|w| w.pieces.iter().copied()).collect()
    }

    /// Frame labels per piece, in the alignment's own frame unit.
    pub fn labels(&self, strategy: Strategy) -> Result<AlignLabels> {
        self.validate()?;
        let mut out = Vec::new();
        for w in self.words.iter().filter(|w| !w.is_silence()) {
            let n = w.pieces.len();
            match strategy {
                Strategy::As1 => out.extend(std::iter::repeat_n(w.end, n)),
                Strategy::As2 => out.extend((1..=n).map(|r| split_point(w.start, w.end, r, n))),
            }
        }
        AlignLabels::new(out)
    }
}

/// `round(s + (r / n) (e - s))`, half away from zero, in exact integer arithmetic.
fn split_point(start: usize, end: usize, r: usize, n: usize) -> usize {
    let num = start * n + r * (end - start);
    (2 * num + n) / (2 * n)
}

pub fn align_as1(words: &WordAlignment) -> Result<AlignLabels> {
    words.labels(Strategy::As1)
}

pub fn align_as2(words: &WordAlignment) -> Result<AlignLabels> {
    words.labels(Strategy::As2)
}

/// Converts acoustic-frame labels to encoder frames: `floor(a / divisor)`,
/// clamped to `[0, frames)`.
pub fn subsample(labels: &AlignLabels, divisor: usize, frames: usize) -> Result<AlignLabels> {
    if divisor == 0 {
        return Err(Error::InvalidArgument("subsample divisor must be positive".into()));
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("zero encoder frames".into()));
    }
    AlignLabels::new(labels.as_slice().iter().map(|&a| (a / divisor).min(frames - 1)).collect())
}
