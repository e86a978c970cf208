//! Diacritized Arabic text to Latin phoneme symbols.
//!
//! The transliteration is a closed, Buckwalter-style table: one symbol per
//! consonant, emphatics written as doubled letters (`ss`, `dd`, `tt`, `zz`),
//! long vowels as doubled vowels (`aa`, `ii`, `uu`). Shadda repeats the
//! consonant symbol, tanween emits its short vowel followed by `n`, sukun emits
//! nothing, and every space becomes the word separator `|`.
//!
//! Symbol ids (see [`symbol_table`]) are contiguous from 0, with 0 reserved for
//! padding. The table holds [`SYMBOL_COUNT`] = 40 entries:
//!
//! | ids     | symbols                                                     |
//! |---------|-------------------------------------------------------------|
//! | 0       | `<pad>`                                                     |
//! | 1       | `\|` (word separator)                                       |
//! | 2..=5   | `.` `,` `?` `!`                                             |
//! | 6..=11  | `a` `u` `i` `aa` `uu` `ii`                                  |
//! | 12..=39 | `'` `b` `t` `th` `j` `H` `kh` `d` `dh` `r` `z` `s` `sh` `ss` `dd` `tt` `zz` `E` `gh` `f` `q` `k` `l` `m` `n` `h` `w` `y` |

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const SEPARATOR: &str = "|";
pub const SYMBOL_COUNT: usize = 40;

const SYMBOLS: [&str; SYMBOL_COUNT] = [
    PAD, SEPARATOR, ".", ",", "?", "!", "a", "u", "i", "aa", "uu", "ii", "'", "b", "t", "th", "j",
    "H", "kh", "d", "dh", "r", "z", "s", "sh", "ss", "dd", "tt", "zz", "E", "gh", "f", "q", "k",
    "l", "m", "n", "h", "w", "y",
];

const FATHATAN: char = '\u{064B}';
const DAMMATAN: char = '\u{064C}';
const KASRATAN: char = '\u{064D}';
const FATHA: char = '\u{064E}';
const DAMMA: char = '\u{064F}';
const KASRA: char = '\u{0650}';
const SHADDA: char = '\u{0651}';
const SUKUN: char = '\u{0652}';

const ALEF_MADDA: char = '\u{0622}';
const ALEF: char = '\u{0627}';
const TATWEEL: char = '\u{0640}';
const ALEF_MAKSURA: char = '\u{0649}';
const WAW: char = '\u{0648}';
const YEH: char = '\u{064A}';

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PhonetizeError {
    #[error("codepoint U+{:04X} at position {position} is outside the accepted alphabet", *.codepoint as u32)]
    RejectedCodepoint { position: usize, codepoint: char },
    #[error("diacritic at position {0} has no preceding letter")]
    OrphanDiacritic(usize),
    #[error("diacritic at position {0} is stacked on another diacritic")]
    StackedDiacritic(usize),
}

/// Identifier of a symbol in the fixed table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolId(pub u16);

impl SymbolId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn as_str(self) -> &'static str {
        SYMBOLS[self.index()]
    }
}

impl fmt::Display for SymbolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Looks up a symbol string. Returns `None` for strings outside the table.
pub fn symbol_id(symbol: &str) -> Option<SymbolId> {
    SYMBOLS.iter().position(|s| *s == symbol).map(|i| SymbolId(i as u16))
}

fn sym(symbol: &str) -> SymbolId {
    symbol_id(symbol).unwrap_or_else(|| panic!("symbol {symbol:?} missing from table"))
}

/// The ordered `(symbol, id)` enumeration used for embedding indexing.
pub fn symbol_table() -> Vec<(String, usize)> {
    SYMBOLS.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Consonant,
    /// Alef and alef maksura: lengthen a preceding fatha, otherwise `aa`.
    LongA,
    Tatweel,
    Diacritic,
    Space,
    Punct,
}

fn classify(c: char) -> Option<Class> {
    match c {
        ALEF | ALEF_MAKSURA => Some(Class::LongA),
        TATWEEL => Some(Class::Tatweel),
        '\u{0621}'..='\u{064A}' => Some(Class::Consonant),
        '\u{064B}'..='\u{0652}' => Some(Class::Diacritic),
        ' ' => Some(Class::Space),
        '.' | ',' | '?' | '!' => Some(Class::Punct),
        _ => None,
    }
}

fn is_vowel_mark(c: char) -> bool {
    matches!(c, FATHATAN | DAMMATAN | KASRATAN | FATHA | DAMMA | KASRA)
}

/// Consonant symbol for a letter of [`Class::Consonant`].
fn consonant_symbol(c: char) -> &'static str {
    match c {
        '\u{0621}' | '\u{0623}' | '\u{0624}' | '\u{0625}' | '\u{0626}' | ALEF_MADDA => "'",
        '\u{0628}' => "b",
        '\u{0629}' | '\u{062A}' => "t",
        '\u{062B}' => "th",
        '\u{062C}' => "j",
        '\u{062D}' => "H",
        '\u{062E}' => "kh",
        '\u{062F}' => "d",
        '\u{0630}' => "dh",
        '\u{0631}' => "r",
        '\u{0632}' => "z",
        '\u{0633}' => "s",
        '\u{0634}' => "sh",
        '\u{0635}' => "ss",
        '\u{0636}' => "dd",
        '\u{0637}' => "tt",
        '\u{0638}' => "zz",
        '\u{0639}' => "E",
        '\u{063A}' => "gh",
        // keheh variants
        '\u{063B}' | '\u{063C}' => "k",
        // farsi yeh variants
        '\u{063D}'..='\u{063F}' => "y",
        '\u{0641}' => "f",
        '\u{0642}' => "q",
        '\u{0643}' => "k",
        '\u{0644}' => "l",
        '\u{0645}' => "m",
        '\u{0646}' => "n",
        '\u{0647}' => "h",
        WAW => "w",
        YEH => "y",
        other => unreachable!("U+{:04X} is not a consonant", other as u32),
    }
}

/// Validated diacritized Arabic text.
///
/// Construction canonicalizes a short vowel written before shadda into the
/// shadda-first order, so stored text always satisfies: diacritics only follow
/// a letter, and the only legal stack is shadda followed by one vowel mark.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DiacriticText {
    chars: Vec<char>,
}

impl DiacriticText {
    pub fn new(raw: &str) -> Result<Self, PhonetizeError> {
        let mut chars: Vec<char> = raw.chars().collect();
        for (position, &c) in chars.iter().enumerate() {
            if classify(c).is_none() {
                return Err(PhonetizeError::RejectedCodepoint { position, codepoint: c });
            }
        }
        // vowel + shadda (Unicode canonical order) -> shadda + vowel
        for i in 1..chars.len() {
            if chars[i] == SHADDA && is_vowel_mark(chars[i - 1]) {
                chars.swap(i - 1, i);
            }
        }
        for i in 0..chars.len() {
            if classify(chars[i]) != Some(Class::Diacritic) {
                continue;
            }
            let prev = if i == 0 { None } else { Some(chars[i - 1]) };
            match prev.and_then(classify) {
                Some(Class::Consonant | Class::LongA | Class::Tatweel) => {}
                Some(Class::Diacritic) => {
                    let legal = prev == Some(SHADDA) && is_vowel_mark(chars[i]);
                    let base_ok = i >= 2
                        && matches!(
                            classify(chars[i - 2]),
                            Some(Class::Consonant | Class::LongA | Class::Tatweel)
                        );
                    if !(legal && base_ok) {
                        return Err(PhonetizeError::StackedDiacritic(i));
                    }
                }
                _ => return Err(PhonetizeError::OrphanDiacritic(i)),
            }
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

impl fmt::Display for DiacriticText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.chars.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

/// Output of [`phonetize`]: symbol ids plus the count of consonants that
/// carried no diacritic (partial diacritization is tolerated).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PhonemeSequence {
    symbols: Vec<SymbolId>,
    undiacritized: usize,
}

impl PhonemeSequence {
    pub fn symbols(&self) -> &[SymbolId] {
        &self.symbols
    }

    pub fn ids(&self) -> Vec<usize> {
        self.symbols.iter().map(|s| s.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of consonants that were emitted without a vowel or sukun.
    pub fn undiacritized(&self) -> usize {
        self.undiacritized
    }

    pub fn to_strings(&self) -> Vec<&'static str> {
        self.symbols.iter().map(|s| s.as_str()).collect()
    }

    /// Concatenates with `other`, summing warning counters.
    pub fn extend(&mut self, other: &PhonemeSequence) {
        self.symbols.extend_from_slice(&other.symbols);
        self.undiacritized += other.undiacritized;
    }
}

impl fmt::Display for PhonemeSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let strings = self.to_strings();
        f.write_str(&strings.join(" "))
    }
}

struct Ids {
    a: SymbolId,
    u: SymbolId,
    i: SymbolId,
    aa: SymbolId,
    uu: SymbolId,
    ii: SymbolId,
    n: SymbolId,
    hamza: SymbolId,
    sep: SymbolId,
}

fn ids() -> &'static Ids {
    static IDS: OnceLock<Ids> = OnceLock::new();
    IDS.get_or_init(|| Ids {
        a: sym("a"),
        u: sym("u"),
        i: sym("i"),
        aa: sym("aa"),
        uu: sym("uu"),
        ii: sym("ii"),
        n: sym("n"),
        hamza: sym("'"),
        sep: sym(SEPARATOR),
    })
}

/// Vowel symbols for a mark: short vowel plus optional nunation.
fn vowel_symbols(mark: char) -> (SymbolId, bool) {
    let t = ids();
    match mark {
        FATHA => (t.a, false),
        DAMMA => (t.u, false),
        KASRA => (t.i, false),
        FATHATAN => (t.a, true),
        DAMMATAN => (t.u, true),
        KASRATAN => (t.i, true),
        other => unreachable!("U+{:04X} is not a vowel mark", other as u32),
    }
}

/// Transliterates validated text. Total over [`DiacriticText`].
pub fn phonetize(text: &DiacriticText) -> PhonemeSequence {
    let t = ids();
    let chars = text.chars();
    let mut out = PhonemeSequence::default();
    // What the previous base letter ended with, for long-vowel rules. Reset at
    // word boundaries so words transliterate independently.
    #[derive(Clone, Copy, PartialEq)]
    enum Tail {
        None,
        ShortVowel(char),
        Tanween(char),
        Other,
    }
    let mut tail = Tail::None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        // marks attached to this letter
        let mut j = i + 1;
        let mut shadda = false;
        let mut vowel = None;
        let mut sukun = false;
        while j < chars.len() && classify(chars[j]) == Some(Class::Diacritic) {
            match chars[j] {
                SHADDA => shadda = true,
                SUKUN => sukun = true,
                m => vowel = Some(m),
            }
            j += 1;
        }
        let emit_vowel = |out: &mut PhonemeSequence, mark: char| {
            let (v, nun) = vowel_symbols(mark);
            out.symbols.push(v);
            if nun {
                out.symbols.push(t.n);
            }
        };
        match classify(c).expect("validated") {
            Class::Space => {
                out.symbols.push(t.sep);
                tail = Tail::None;
            }
            Class::Punct => {
                out.symbols.push(sym(&c.to_string()));
                tail = Tail::None;
            }
            Class::Tatweel => {
                if let Some(m) = vowel {
                    emit_vowel(&mut out, m);
                    tail = if vowel_symbols(m).1 { Tail::Tanween(m) } else { Tail::ShortVowel(m) };
                }
            }
            Class::LongA => {
                if let Some(m) = vowel {
                    emit_vowel(&mut out, m);
                    tail = Tail::Other;
                } else {
                    match tail {
                        Tail::ShortVowel(FATHA) => {
                            *out.symbols.last_mut().expect("vowel emitted") = t.aa;
                        }
                        // orthographic alef after fathatan is silent
                        Tail::Tanween(FATHATAN) => {}
                        _ => out.symbols.push(t.aa),
                    }
                    tail = Tail::Other;
                }
            }
            Class::Consonant => {
                let bare = vowel.is_none() && !sukun && !shadda;
                let lengthens = bare
                    && ((c == WAW && tail == Tail::ShortVowel(DAMMA))
                        || (c == YEH && tail == Tail::ShortVowel(KASRA)));
                if lengthens {
                    let long = if c == WAW { t.uu } else { t.ii };
                    *out.symbols.last_mut().expect("vowel emitted") = long;
                    tail = Tail::Other;
                } else {
                    let consonant = sym(consonant_symbol(c));
                    out.symbols.push(consonant);
                    if shadda {
                        out.symbols.push(consonant);
                    }
                    if c == ALEF_MADDA {
                        out.symbols.push(t.aa);
                        debug_assert_eq!(consonant, t.hamza);
                    }
                    if bare && c != ALEF_MADDA {
                        out.undiacritized += 1;
                    }
                    tail = match vowel {
                        Some(m) => {
                            emit_vowel(&mut out, m);
                            if vowel_symbols(m).1 {
                                Tail::Tanween(m)
                            } else {
                                Tail::ShortVowel(m)
                            }
                        }
                        None => Tail::Other,
                    };
                }
            }
            Class::Diacritic => unreachable!("marks are consumed with their letter"),
        }
        i = j;
    }
    out
}

/// Validates and transliterates raw text.
pub fn phonetize_str(raw: &str) -> Result<PhonemeSequence, PhonetizeError> {
    Ok(phonetize(&DiacriticText::new(raw)?))
}

/// Every consonant codepoint accepted by the alphabet (letters excluding alef,
/// alef maksura and tatweel).
pub fn consonants() -> impl Iterator<Item = char> {
    ('\u{0621}'..='\u{064A}').filter(|&c| classify(c) == Some(Class::Consonant))
}

/// Every codepoint of the accepted alphabet.
pub fn alphabet() -> impl Iterator<Item = char> {
    ('\u{0621}'..='\u{0652}').chain([' ', '.', ',', '?', '!'])
}
