//! Ascertainment: signatures binding an intent to the party responsible for it.
//!
//! Obligations are signed by their debtor, acceptances by their origin and
//! tenders by their sender. The scheme is pluggable through [`Verifier`]; the
//! default [`KeyRing`] is an HMAC-SHA256 keyed hash, adequate for tests and
//! single-operator deployments where the operator holds every key.

use std::collections::BTreeMap;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::codec::canonical_serialize;
use crate::model::{AgentId, Intent, Token};

type HmacSha256 = Hmac<Sha256>;

/// Checks that `token` was produced over `message` by `party`.
pub trait Verifier {
    fn verify(&self, party: &AgentId, message: &[u8], token: &Token) -> bool;
}

/// Secret key of the keyed-hash scheme.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SigningKey(#[serde(with = "hex")] Vec<u8>);

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

impl SigningKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        SigningKey(bytes.into())
    }

    /// 32 fresh random bytes.
    pub fn generate<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = vec![0u8; 32];
        rng.fill_bytes(&mut bytes);
        SigningKey(bytes)
    }

    /// Key derived from a label; handy for fixtures, never for production keys.
    pub fn derive(label: &str) -> Self {
        use sha2::Digest;
        SigningKey(Sha256::digest(label.as_bytes()).to_vec())
    }

    pub fn sign(&self, message: &[u8]) -> Token {
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(message);
        Token(hex::encode(mac.finalize().into_bytes()))
    }

    fn check(&self, message: &[u8], token: &Token) -> bool {
        let Ok(raw) = hex::decode(&token.0) else {
            return false;
        };
        let mut mac = HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length");
        mac.update(message);
        mac.verify_slice(&raw).is_ok()
    }
}

/// Registered keys per agent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyRing {
    keys: BTreeMap<AgentId, SigningKey>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, agent: AgentId, key: SigningKey) {
        self.keys.insert(agent, key);
    }

    pub fn key(&self, agent: &AgentId) -> Option<&SigningKey> {
        self.keys.get(agent)
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.keys.keys()
    }

    /// Registers a derived key for `agent` if it has none yet.
    pub fn ensure(&mut self, agent: &AgentId) -> &SigningKey {
        self.keys
            .entry(agent.clone())
            .or_insert_with(|| SigningKey::derive(agent.as_str()))
    }

    /// Signs `intent` with its bound party's key. Returns `false` if the key is unknown.
    pub fn sign_intent(&self, intent: &mut Intent) -> bool {
        match self.keys.get(intent.signer()) {
            Some(key) => {
                let token = ascertain(intent, key);
                intent.set_ascertainment(Some(token));
                true
            }
            None => false,
        }
    }
}

impl Verifier for KeyRing {
    fn verify(&self, party: &AgentId, message: &[u8], token: &Token) -> bool {
        self.keys.get(party).is_some_and(|k| k.check(message, token))
    }
}

/// Signature token over the canonical bytes of `intent`.
pub fn ascertain(intent: &Intent, key: &SigningKey) -> Token {
    key.sign(&canonical_serialize(intent))
}

/// True iff the intent carries a token its bound party produced over its current contents.
pub fn verify_ascertainment(intent: &Intent, verifier: &dyn Verifier) -> bool {
    match intent.ascertainment() {
        Some(token) => verifier.verify(intent.signer(), &canonical_serialize(intent), token),
        None => false,
    }
}
