use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub fn flipped(self) -> Self {
        match self {
            Laterality::Left => Laterality::Right,
            Laterality::Right => Laterality::Left,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TStage {
    T1,
    T2,
    T3,
    T4,
}

impl TStage {
    pub const ALL: [TStage; 4] = [TStage::T1, TStage::T2, TStage::T3, TStage::T4];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }

    pub fn is_advanced(self) -> bool {
        self >= TStage::T3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NStage {
    N0,
    N1,
    N2,
}

impl NStage {
    pub const ALL: [NStage; 3] = [NStage::N0, NStage::N1, NStage::N2];

    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Surgery {
    BreastConserving,
    Mastectomy,
}

impl Surgery {
    fn phrase(self) -> &'static str {
        match self {
            Surgery::BreastConserving => "breast conserving surgery",
            Surgery::Mastectomy => "mastectomy",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Surgery::BreastConserving => "breast-conserving",
            Surgery::Mastectomy => "mastectomy",
        }
    }
}

/// Record fields that can be omitted from a rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Laterality,
    TStage,
    NStage,
    Surgery,
    Age,
}

impl Field {
    /// The four clinical fields the omission study ablates.
    pub const CLINICAL: [Field; 4] = [Field::Laterality, Field::NStage, Field::TStage, Field::Surgery];

    pub fn key(self) -> &'static str {
        match self {
            Field::Laterality => "laterality",
            Field::TStage => "t_stage",
            Field::NStage => "n_stage",
            Field::Surgery => "surgery",
            Field::Age => "age",
        }
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "laterality" => Field::Laterality,
            "t_stage" => Field::TStage,
            "n_stage" => Field::NStage,
            "surgery" => Field::Surgery,
            "age" => Field::Age,
            other => return Err(Error::Config(format!("unknown record field '{other}'"))),
        })
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Structured clinical data. `None` marks a field omitted from the record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClinicalRecord {
    pub laterality: Option<Laterality>,
    pub t_stage: Option<TStage>,
    pub n_stage: Option<NStage>,
    pub surgery: Option<Surgery>,
    pub age: Option<u32>,
}

pub const AGE_RANGE: std::ops::RangeInclusive<u32> = 30..=80;

impl ClinicalRecord {
    pub fn new(laterality: Laterality, t_stage: TStage, n_stage: NStage, surgery: Surgery, age: u32) -> Self {
        Self {
            laterality: Some(laterality),
            t_stage: Some(t_stage),
            n_stage: Some(n_stage),
            surgery: Some(surgery),
            age: Some(age),
        }
    }

    /// Every field drawn independently and uniformly; deterministic per seed.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let laterality = if rng.random_bool(0.5) { Laterality::Left } else { Laterality::Right };
        let t_stage = TStage::ALL[rng.random_range(0..4)];
        let n_stage = NStage::ALL[rng.random_range(0..3)];
        let surgery = if rng.random_bool(0.5) { Surgery::BreastConserving } else { Surgery::Mastectomy };
        let age = rng.random_range(AGE_RANGE);
        Self::new(laterality, t_stage, n_stage, surgery, age)
    }

    pub fn has(&self, field: Field) -> bool {
        match field {
            Field::Laterality => self.laterality.is_some(),
            Field::TStage => self.t_stage.is_some(),
            Field::NStage => self.n_stage.is_some(),
            Field::Surgery => self.surgery.is_some(),
            Field::Age => self.age.is_some(),
        }
    }

    pub fn without(mut self, field: Field) -> Self {
        match field {
            Field::Laterality => self.laterality = None,
            Field::TStage => self.t_stage = None,
            Field::NStage => self.n_stage = None,
            Field::Surgery => self.surgery = None,
            Field::Age => self.age = None,
        }
        self
    }

    pub fn without_all(self, fields: &[Field]) -> Self {
        fields.iter().fold(self, |r, &f| r.without(f))
    }

    /// Short phrase for each present field, in declaration order.
    pub fn field_phrases(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(l) = self.laterality {
            out.push(format!("{} breast", l.word()));
        }
        if let Some(t) = self.t_stage {
            out.push(format!("t{}", t.number()));
        }
        if let Some(n) = self.n_stage {
            out.push(format!("n{}", n.number()));
        }
        if let Some(s) = self.surgery {
            out.push(s.phrase().to_string());
        }
        if let Some(a) = self.age {
            out.push(format!("age {a}"));
        }
        out
    }

    /// Clinical sentence; omitted or absent fields drop their clause.
    pub fn render_text(&self, omitted: &[Field]) -> String {
        let r = self.without_all(omitted);
        let mut parts = Vec::new();
        if let Some(age) = r.age {
            parts.push(format!("age {age}."));
        }
        let mut stage = Vec::new();
        if let Some(t) = r.t_stage {
            stage.push(format!("t{}", t.number()));
        }
        if let Some(n) = r.n_stage {
            stage.push(format!("n{}", n.number()));
        }
        stage.push("m0 cancer".to_string());
        let mut clause = stage.join(" ");
        if let Some(l) = r.laterality {
            clause.push_str(&format!(" in the {} breast", l.word()));
        }
        clause.push('.');
        parts.push(clause);
        if let Some(s) = r.surgery {
            parts.push(format!("surgery: {}.", s.phrase()));
        }
        parts.join(" ")
    }

    /// Four-character code: N digit, T digit, surgery digit (0 mastectomy,
    /// 1 breast-conserving), laterality digit (0 left, 1 right); `?` when omitted.
    pub fn render_numeric(&self, omitted: &[Field]) -> String {
        let r = self.without_all(omitted);
        let digit = |d: Option<u8>| d.map_or('?', |v| char::from(b'0' + v));
        [
            digit(r.n_stage.map(NStage::number)),
            digit(r.t_stage.map(TStage::number)),
            digit(r.surgery.map(|s| match s {
                Surgery::Mastectomy => 0,
                Surgery::BreastConserving => 1,
            })),
            digit(r.laterality.map(|l| match l {
                Laterality::Left => 0,
                Laterality::Right => 1,
            })),
        ]
        .iter()
        .collect()
    }

    /// `key: value` lines; absent fields are not written.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.laterality {
            out.push_str(&format!("laterality: {}\n", l.word()));
        }
        if let Some(t) = self.t_stage {
            out.push_str(&format!("t_stage: T{}\n", t.number()));
        }
        if let Some(n) = self.n_stage {
            out.push_str(&format!("n_stage: N{}\n", n.number()));
        }
        if let Some(s) = self.surgery {
            out.push_str(&format!("surgery: {}\n", s.key()));
        }
        if let Some(a) = self.age {
            out.push_str(&format!("age: {a}\n"));
        }
        out
    }

    pub fn parse_file(text: &str) -> Result<Self> {
        let mut r = ClinicalRecord { laterality: None, t_stage: None, n_stage: None, surgery: None, age: None };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("record line {}: cannot parse '{line}'", lineno + 1));
            let (key, value) = line.split_once(':').ok_or_else(bad)?;
            let value = value.trim();
            match key.trim().parse::<Field>().map_err(|_| bad())? {
                Field::Laterality => {
                    r.laterality = Some(match value {
                        "left" => Laterality::Left,
                        "right" => Laterality::Right,
                        _ => return Err(bad()),
                    })
                }
                Field::TStage => {
                    r.t_stage = Some(match value {
                        "T1" => TStage::T1,
                        "T2" => TStage::T2,
                        "T3" => TStage::T3,
                        "T4" => TStage::T4,
                        _ => return Err(bad()),
                    })
                }
                Field::NStage => {
                    r.n_stage = Some(match value {
                        "N0" => NStage::N0,
                        "N1" => NStage::N1,
                        "N2" => NStage::N2,
                        _ => return Err(bad()),
                    })
                }
                Field::Surgery => {
                    r.surgery = Some(match value {
                        "breast-conserving" => Surgery::BreastConserving,
                        "mastectomy" => Surgery::Mastectomy,
                        _ => return Err(bad()),
                    })
                }
                Field::Age => r.age = Some(value.parse().map_err(|_| bad())?),
            }
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> ClinicalRecord {
        ClinicalRecord::new(Laterality::Left, TStage::T1, NStage::N0, Surgery::BreastConserving, 52)
    }

    #[test]
    fn field_phrases_follow_field_order() {
        assert_eq!(example().field_phrases(), ["left breast", "t1", "n0", "breast conserving surgery", "age 52"]);
        assert_eq!(example().without_all(&[Field::Laterality, Field::Age]).field_phrases(), ["t1", "n0", "breast conserving surgery"]);
    }

    #[test]
    fn template_instantiation() {
        assert_eq!(
            example().render_text(&[]),
            "age 52. t1 n0 m0 cancer in the left breast. surgery: breast conserving surgery."
        );
    }

    #[test]
    fn omitting_laterality_drops_the_side_clause() {
        let text = example().render_text(&[Field::Laterality]);
        assert_eq!(text, "age 52. t1 n0 m0 cancer. surgery: breast conserving surgery.");
        assert!(!text.contains("in the left breast"));
    }

    #[test]
    fn flipping_laterality_changes_only_the_side_word() {
        let mut r = example();
        r.laterality = Some(Laterality::Right);
        let (a, b) = (example().render_text(&[]), r.render_text(&[]));
        let diff: Vec<_> = a.split(' ').zip(b.split(' ')).filter(|(x, y)| x != y).collect();
        assert_eq!(diff, vec![("left", "right")]);
    }

    #[test]
    fn numeric_codes() {
        let r = ClinicalRecord::new(Laterality::Right, TStage::T3, NStage::N0, Surgery::Mastectomy, 60);
        assert_eq!(r.render_numeric(&[]), "0301");
        assert_eq!(r.render_numeric(&[Field::NStage]), "?301");
        let r = ClinicalRecord::new(Laterality::Left, TStage::T1, NStage::N2, Surgery::BreastConserving, 60);
        assert_eq!(r.render_numeric(&[]), "2110");
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(ClinicalRecord::sample(17), ClinicalRecord::sample(17));
    }

    #[test]
    fn record_file_round_trip_keeps_omissions() {
        let r = example().without(Field::Surgery);
        let parsed = ClinicalRecord::parse_file(&r.to_file_string()).unwrap();
        assert_eq!(parsed, r);
        assert!(ClinicalRecord::parse_file("laterality: middle\n").is_err());
        assert!(ClinicalRecord::parse_file("colour: red\n").is_err());
    }
}
