use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VocabError {
    #[error("vocabulary has no instruments")]
    Empty,
    #[error("program {program} is claimed by both {first:?} and {second:?}")]
    Overlap { program: u8, first: String, second: String },
    #[error("program number {0} outside [0, 127]")]
    ProgramRange(u32),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub name: String,
    pub programs: BTreeSet<u8>,
}

/// Ordered list of instrument classes, each a set of General MIDI programs.
///
/// The text form is one `key = value` per line: `id = <name>` sets the
/// identifier and every other key is an instrument name whose value lists
/// programs as comma-separated numbers or inclusive `a-b` ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstrumentVocab {
    id: String,
    entries: Vec<VocabEntry>,
}

impl InstrumentVocab {
    pub fn new(id: impl Into<String>, entries: Vec<VocabEntry>) -> Result<Self, VocabError> {
        if entries.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut owner: [Option<usize>; 128] = [None; 128];
        for (i, e) in entries.iter().enumerate() {
            for &p in &e.programs {
                if p > 127 {
                    return Err(VocabError::ProgramRange(p as u32));
                }
                if let Some(j) = owner[p as usize] {
                    return Err(VocabError::Overlap { program: p, first: entries[j].name.clone(), second: e.name.clone() });
                }
                owner[p as usize] = Some(i);
            }
        }
        Ok(Self { id: id.into(), entries })
    }

    /// The eight-instrument vocabulary: piano, acoustic guitar, electric
    /// guitar, trumpet, sax, violin, cello, flute.
    pub fn default8() -> Self {
        let spec: [(&str, &[u8]); 8] = [
            ("piano", &[0, 1, 2, 3, 4, 5, 6, 7]),
            ("acoustic guitar", &[24, 25]),
            ("electric guitar", &[26, 27, 28, 29, 30, 31]),
            ("trumpet", &[56]),
            ("sax", &[64, 65, 66, 67]),
            ("violin", &[40]),
            ("cello", &[42]),
            ("flute", &[73]),
        ];
        Self::from_table("default8", &spec)
    }

    /// A subset of [`Self::default8`] keeping the named instruments in the given order.
    pub fn subset(&self, id: impl Into<String>, names: &[&str]) -> Option<Self> {
        let entries = names.iter().map(|n| self.entries.iter().find(|e| e.name == *n).cloned()).collect::<Option<Vec<_>>>()?;
        Self::new(id, entries).ok()
    }

    fn from_table(id: &str, table: &[(&str, &[u8])]) -> Self {
        let entries =
            table.iter().map(|(name, progs)| VocabEntry { name: name.to_string(), programs: progs.iter().copied().collect() }).collect();
        Self::new(id, entries).expect("built-in vocabulary is valid")
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut id = String::from("custom");
        let mut entries = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |message: &str| VocabError::Syntax { line: ln + 1, message: message.to_string() };
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(syntax("empty key"));
            }
            if key == "id" {
                id = value.to_string();
                continue;
            }
            let mut programs = BTreeSet::new();
            for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (lo, hi) = match item.split_once('-') {
                    Some((a, b)) => (a.trim(), b.trim()),
                    None => (item, item),
                };
                let lo: u32 = lo.parse().map_err(|_| syntax("bad program number"))?;
                let hi: u32 = hi.parse().map_err(|_| syntax("bad program number"))?;
                if lo > 127 {
                    return Err(VocabError::ProgramRange(lo));
                }
                if hi > 127 {
                    return Err(VocabError::ProgramRange(hi));
                }
                if lo > hi {
                    return Err(syntax("descending program range"));
                }
                programs.extend((lo..=hi).map(|p| p as u8));
            }
            if programs.is_empty() {
                return Err(syntax("instrument without programs"));
            }
            entries.push(VocabEntry { name: key.to_string(), programs });
        }
        Self::new(id, entries)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn index_of_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Vocabulary index whose program set contains `program`.
    pub fn index_of_program(&self, program: u8) -> Option<usize> {
        self.entries.iter().position(|e| e.programs.contains(&program))
    }

    /// Lowest program of entry `index`, used when writing MIDI.
    pub fn representative_program(&self, index: usize) -> u8 {
        *self.entries[index].programs.iter().next().expect("entries are non-empty")
    }
}

impl fmt::Display for InstrumentVocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "id = {}", self.id)?;
        for e in &self.entries {
            let progs: Vec<String> = e.programs.iter().map(|p| p.to_string()).collect();
            writeln!(f, "{} = {}", e.name, progs.join(","))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocab_has_eight_disjoint_entries() {
        let v = InstrumentVocab::default8();
        assert_eq!(v.len(), 8);
        assert_eq!(v.index_of_program(0), v.index_of_name("piano"));
        assert_eq!(v.index_of_program(40), v.index_of_name("violin"));
        assert_eq!(v.index_of_program(120), None);
    }

    #[test]
    fn parse_roundtrips_through_display() {
        let v = InstrumentVocab::default8();
        let back = InstrumentVocab::parse(&v.to_string()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn parse_ranges_and_comments() {
        let v = InstrumentVocab::parse("id = tiny\n# comment\nkeys = 0-2, 5\nbass = 32\n").unwrap();
        assert_eq!(v.id(), "tiny");
        assert_eq!(v.entries()[0].programs, [0u8, 1, 2, 5].into_iter().collect());
        assert_eq!(v.index_of_program(32), Some(1));
    }

    #[test]
    fn rejects_overlap_range_and_empty() {
        assert!(matches!(InstrumentVocab::parse("a = 1-3\nb = 3"), Err(VocabError::Overlap { program: 3, .. })));
        assert!(matches!(InstrumentVocab::parse("a = 128"), Err(VocabError::ProgramRange(128))));
        assert_eq!(InstrumentVocab::parse("id = x\n"), Err(VocabError::Empty));
        assert!(matches!(InstrumentVocab::parse("a 1"), Err(VocabError::Syntax { line: 1, .. })));
    }

    #[test]
    fn subset_keeps_order() {
        let v = InstrumentVocab::default8().subset("trio", &["flute", "piano", "cello"]).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.name(0), "flute");
        assert_eq!(v.index_of_program(42), Some(2));
        assert!(InstrumentVocab::default8().subset("x", &["kazoo"]).is_none());
    }
}
