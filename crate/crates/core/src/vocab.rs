//! Token layout shared by the policy, the task generator and GEC.
//!
//! Reserved ids occupy the low end of the table; digit tokens follow, so a
//! vocabulary with `digits = 10` has `V = 21`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;
pub type TokenSeq = Vec<Token>;

pub const BOS: Token = 0;
pub const EOS: Token = 1;
/// Closes the question ("3+4=").
pub const QUERY_END: Token = 2;
pub const ANSWER_MARK: Token = 3;
pub const OP_ADD: Token = 4;
pub const OP_SUB: Token = 5;
pub const OP_MUL: Token = 6;
/// "Wait!"
pub const REFLECT_WAIT: Token = 7;
/// "Hmm"
pub const REFLECT_HMM: Token = 8;
/// "Let's check it again!"
pub const REFLECT_CHECK: Token = 9;
/// "Something is wrong here."
pub const REFLECT_WRONG: Token = 10;

const RESERVED: Token = 11;

pub const DEFAULT_DIGITS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    digits: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            digits: DEFAULT_DIGITS,
        }
    }
}

impl Vocab {
    /// `digits` is the number of answer tokens, i.e. the largest modulus the
    /// vocabulary can express.
    pub fn new(digits: u32) -> Result<Self> {
        if digits < 2 {
            return Err(Error::invalid(format!(
                "vocabulary needs at least 2 digit tokens, got {digits}"
            )));
        }
        Ok(Vocab { digits })
    }

    pub fn size(&self) -> usize {
        (RESERVED + self.digits) as usize
    }

    pub fn digits(&self) -> u32 {
        self.digits
    }

    pub fn digit(&self, value: u32) -> Token {
        assert!(value < self.digits, "digit {value} outside vocabulary");
        RESERVED + value
    }

    pub fn as_digit(&self, token: Token) -> Option<u32> {
        (RESERVED..RESERVED + self.digits)
            .contains(&token)
            .then(|| token - RESERVED)
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.size()
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.contains(t)) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab: self.size(),
            }),
            None => Ok(()),
        }
    }

    pub fn reserved(&self) -> [Token; RESERVED as usize] {
        [
            BOS,
            EOS,
            QUERY_END,
            ANSWER_MARK,
            OP_ADD,
            OP_SUB,
            OP_MUL,
            REFLECT_WAIT,
            REFLECT_HMM,
            REFLECT_CHECK,
            REFLECT_WRONG,
        ]
    }

    /// Human-readable rendering, e.g. `<bos> 3 + 4 = <ans> 7 <eos>`.
    pub fn render(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                BOS => "<bos>".to_string(),
                EOS => "<eos>".to_string(),
                QUERY_END => "=".to_string(),
                ANSWER_MARK => "<ans>".to_string(),
                OP_ADD => "+".to_string(),
                OP_SUB => "-".to_string(),
                OP_MUL => "*".to_string(),
                REFLECT_WAIT => "Wait!".to_string(),
                REFLECT_HMM => "Hmm".to_string(),
                REFLECT_CHECK => "Let's check it again!".to_string(),
                REFLECT_WRONG => "Something is wrong here.".to_string(),
                _ => match self.as_digit(t) {
                    Some(d) => d.to_string(),
                    None => format!("<{t}?>"),
                },
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_in_range() {
        let v = Vocab::default();
        let reserved = v.reserved();
        assert!(v.size() >= 8);
        for (i, a) in reserved.iter().enumerate() {
            assert!(v.contains(*a));
            for b in &reserved[i + 1..] {
                assert_ne!(a, b);
            }
            assert_eq!(v.as_digit(*a), None);
        }
    }

    #[test]
    fn digits_round_trip() {
        let v = Vocab::new(7).unwrap();
        for d in 0..7 {
            assert_eq!(v.as_digit(v.digit(d)), Some(d));
        }
        assert_eq!(v.as_digit(v.size() as u32), None);
        assert!(Vocab::new(1).is_err());
    }

    #[test]
    fn render_shows_question() {
        let v = Vocab::default();
        let s = v.render(&[BOS, v.digit(3), OP_ADD, v.digit(4), QUERY_END]);
        assert_eq!(s, "<bos> 3 + 4 =");
    }
}
