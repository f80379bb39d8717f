//! Shared vocabulary: diagnostic classes, protected attributes and the
//! per-participant record.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

macro_rules! token_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $token)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $token),+ }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

token_enum!(
    /// Diagnostic label. Declaration order is the fixed class order used for
    /// probability vectors and tie-breaking.
    Class { Control => "control", Mci => "mci", Ad => "ad" }
);

token_enum!(Gender { Female => "female", Male => "male" });

token_enum!(AgeGroup { A46To65 => "a46_65", A66To80 => "a66_80", A80Plus => "a80_plus" });

token_enum!(Education {
    Elementary => "elementary",
    HighSchool => "high_school",
    Undergraduate => "undergraduate",
    Graduate => "graduate",
});

token_enum!(Language { English => "english", Spanish => "spanish", Mandarin => "mandarin" });

pub const NUM_CLASSES: usize = 3;

/// Class probability vector in [`Class`] order.
pub type Probs = [f64; NUM_CLASSES];

impl Class {
    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }
}

impl Education {
    /// Ordinal code used for imputation (0 = elementary .. 3 = graduate).
    pub fn ordinal(self) -> usize {
        self.index()
    }

    pub fn from_ordinal(code: usize) -> Option<Education> {
        Education::ALL.get(code).copied()
    }
}

impl AgeGroup {
    /// An age inside the bin, used when only the group is known.
    pub fn representative_age(self) -> u32 {
        match self {
            AgeGroup::A46To65 => 56,
            AgeGroup::A66To80 => 73,
            AgeGroup::A80Plus => 86,
        }
    }
}

fn parse_token<T: Copy>(all: &[T], as_str: impl Fn(T) -> &'static str, raw: &str) -> Option<T> {
    let needle = raw.trim().to_ascii_lowercase();
    all.iter().copied().find(|v| as_str(*v) == needle)
}

impl FromStr for Class {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cn" | "healthy" | "hc" => Ok(Class::Control),
            other => parse_token(Class::ALL, Class::as_str, other)
                .ok_or_else(|| "expected one of control, mci, ad".to_string()),
        }
    }
}

impl FromStr for Gender {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" => Ok(Gender::Female),
            "m" => Ok(Gender::Male),
            other => parse_token(Gender::ALL, Gender::as_str, other)
                .ok_or_else(|| "expected female or male".to_string()),
        }
    }
}

impl FromStr for Language {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" => Ok(Language::English),
            "es" => Ok(Language::Spanish),
            "zh" => Ok(Language::Mandarin),
            other => parse_token(Language::ALL, Language::as_str, other)
                .ok_or_else(|| "expected english, spanish or mandarin".to_string()),
        }
    }
}

impl FromStr for AgeGroup {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "46-65" | "46_65" => Ok(AgeGroup::A46To65),
            "66-80" | "66_80" => Ok(AgeGroup::A66To80),
            "80+" | "81+" | ">=81" => Ok(AgeGroup::A80Plus),
            other => parse_token(AgeGroup::ALL, AgeGroup::as_str, other)
                .ok_or_else(|| "expected a46_65, a66_80 or a80_plus".to_string()),
        }
    }
}

impl FromStr for Education {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_token(Education::ALL, Education::as_str, s)
            .ok_or_else(|| "expected elementary, high_school, undergraduate or graduate".into())
    }
}

/// A record column that can be used to group subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Gender,
    Age,
    Education,
    Language,
    Label,
}

impl Field {
    pub const PROTECTED: &'static [Field] =
        &[Field::Gender, Field::Age, Field::Education, Field::Language];

    pub fn is_protected(self) -> bool {
        self != Field::Label
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Field::Gender => "gender",
            Field::Age => "age",
            Field::Education => "education",
            Field::Language => "language",
            Field::Label => "label",
        }
    }

    /// The tokens this field can take, in declaration order.
    pub fn values(self) -> Vec<&'static str> {
        match self {
            Field::Gender => Gender::ALL.iter().map(|v| v.as_str()).collect(),
            Field::Age => AgeGroup::ALL.iter().map(|v| v.as_str()).collect(),
            Field::Education => Education::ALL.iter().map(|v| v.as_str()).collect(),
            Field::Language => Language::ALL.iter().map(|v| v.as_str()).collect(),
            Field::Label => Class::ALL.iter().map(|v| v.as_str()).collect(),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Field {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gender" => Ok(Field::Gender),
            "age" | "age_group" => Ok(Field::Age),
            "education" => Ok(Field::Education),
            "language" => Ok(Field::Language),
            "label" => Ok(Field::Label),
            other => Err(format!("unknown field {other:?}")),
        }
    }
}

/// One participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub gender: Gender,
    pub age_years: Option<u32>,
    pub age_group: AgeGroup,
    pub education: Option<Education>,
    pub language: Language,
    pub label: Class,
}

impl SubjectRecord {
    /// Token of `field` for this subject; `None` only for missing education.
    pub fn value_of(&self, field: Field) -> Option<&'static str> {
        match field {
            Field::Gender => Some(self.gender.as_str()),
            Field::Age => Some(self.age_group.as_str()),
            Field::Education => self.education.map(Education::as_str),
            Field::Language => Some(self.language.as_str()),
            Field::Label => Some(self.label.as_str()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for c in Class::ALL {
            assert_eq!(c.as_str().parse::<Class>().unwrap(), *c);
        }
        for e in Education::ALL {
            assert_eq!(Education::from_ordinal(e.ordinal()), Some(*e));
        }
        assert_eq!("80+".parse::<AgeGroup>().unwrap(), AgeGroup::A80Plus);
        assert!("french".parse::<Language>().is_err());
        assert_eq!(serde_json::to_string(&AgeGroup::A66To80).unwrap(), "\"a66_80\"");
    }

    #[test]
    fn class_order_is_fixed() {
        assert_eq!(Class::ALL, &[Class::Control, Class::Mci, Class::Ad]);
        assert_eq!(Class::from_index(2), Some(Class::Ad));
    }
}
