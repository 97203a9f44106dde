use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::mr::is_placeholder;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;

/// Token/id bijection. Ids 0..3 are reserved for `<s>`, `</s>` and `<unk>`;
/// placeholders come next in sorted order, then ordinary words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let reserved = [BOS, EOS, UNK];
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !reserved.contains(&w.as_str()))
            .collect();
        let (slots, plain): (Vec<String>, Vec<String>) =
            set.into_iter().partition(|w| is_placeholder(w));
        let tokens: Vec<String> = reserved
            .iter()
            .map(|s| s.to_string())
            .chain(slots)
            .chain(plain)
            .collect();
        Self::from_tokens(tokens).expect("built vocab is a bijection")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != BOS || tokens[1] != EOS || tokens[2] != UNK {
            return Err(Error::InvalidInput(
                "vocab must start with <s> </s> <unk>".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn is_placeholder(&self, id: TokenId) -> bool {
        is_placeholder(self.token(id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}
