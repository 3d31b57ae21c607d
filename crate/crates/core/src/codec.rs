//! Canonical byte encoding of intents, the payload that ascertainment tokens sign.
//!
//! Layout (all integers big-endian, field order fixed):
//!
//! ```text
//! intent      = version:u8 (=1) tag:u8 body
//! tag         = 0x01 obligation | 0x02 acceptance | 0x03 tender
//! str         = len:u32 utf8[len]
//! amount      = u64
//! opt<T>      = 0x00 | 0x01 T
//! date        = str (ISO-8601 "YYYY-MM-DD")
//! limit       = 0x00 (infinite) | 0x01 amount
//! price       = num:u64 den:u64
//!
//! obligation  = id:str debtor:str creditor:str amount unit:str due_date:opt<date>
//! acceptance  = id:str origin:str target:str kind:u8 (0 deposit, 1 repayment)
//!               limit currency:str repayment_due:opt<date>
//! tender      = id:str sender:str source:str kind:u8 (0 assignment, 1 overdraft)
//!               currency:str max_amount price:opt<price>
//! ```
//!
//! The ascertainment token is not part of the encoding. The JSON form used in
//! files lists the same fields in the same order, followed by `ascertainment`.

use chrono::NaiveDate;
use thiserror::Error;

use crate::model::{
    Acceptance, AcceptanceKind, AgentId, Amount, AssetCode, Intent, IntentId, Limit, ModelError, Obligation,
    Price, Tender, TenderKind,
};

pub const CODEC_VERSION: u8 = 1;

const TAG_OBLIGATION: u8 = 0x01;
const TAG_ACCEPTANCE: u8 = 0x02;
const TAG_TENDER: u8 = 0x03;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("unsupported codec version {0}")]
    Version(u8),
    #[error("unknown tag {0:#04x}")]
    Tag(u8),
    #[error("invalid utf-8 in string field")]
    Utf8,
    #[error("invalid date {0:?}")]
    Date(String),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Field(#[from] ModelError),
}

/// Deterministic encoding of `intent`, excluding its ascertainment token.
pub fn canonical_serialize(intent: &Intent) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(128));
    w.u8(CODEC_VERSION);
    match intent {
        Intent::Obligation(o) => {
            w.u8(TAG_OBLIGATION);
            w.str(o.id.as_str());
            w.str(o.debtor.as_str());
            w.str(o.creditor.as_str());
            w.u64(o.amount.0);
            w.str(o.unit.as_str());
            w.opt_date(o.due_date);
        }
        Intent::Acceptance(a) => {
            w.u8(TAG_ACCEPTANCE);
            w.str(a.id.as_str());
            w.str(a.origin.as_str());
            w.str(a.target.as_str());
            w.u8(match a.kind {
                AcceptanceKind::Deposit => 0,
                AcceptanceKind::Repayment => 1,
            });
            match a.limit {
                Limit::Infinite => w.u8(0),
                Limit::Finite(x) => {
                    w.u8(1);
                    w.u64(x.0);
                }
            }
            w.str(a.currency.as_str());
            w.opt_date(a.repayment_due);
        }
        Intent::Tender(t) => {
            w.u8(TAG_TENDER);
            w.str(t.id.as_str());
            w.str(t.sender.as_str());
            w.str(t.source.as_str());
            w.u8(match t.kind {
                TenderKind::Assignment => 0,
                TenderKind::Overdraft => 1,
            });
            w.str(t.currency.as_str());
            w.u64(t.max_amount.0);
            match t.price {
                None => w.u8(0),
                Some(p) => {
                    w.u8(1);
                    w.u64(p.num);
                    w.u64(p.den);
                }
            }
        }
    }
    w.0
}

/// Inverse of [`canonical_serialize`]. The result carries no ascertainment token.
pub fn canonical_parse(bytes: &[u8]) -> Result<Intent, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = r.u8()?;
    if version != CODEC_VERSION {
        return Err(DecodeError::Version(version));
    }
    let intent = match r.u8()? {
        TAG_OBLIGATION => Intent::Obligation(Obligation {
            id: IntentId::new(r.str()?)?,
            debtor: AgentId::new(r.str()?)?,
            creditor: AgentId::new(r.str()?)?,
            amount: Amount(r.u64()?),
            unit: AssetCode::new(r.str()?)?,
            due_date: r.opt_date()?,
            ascertainment: None,
        }),
        TAG_ACCEPTANCE => Intent::Acceptance(Acceptance {
            id: IntentId::new(r.str()?)?,
            origin: AgentId::new(r.str()?)?,
            target: AgentId::new(r.str()?)?,
            kind: match r.u8()? {
                0 => AcceptanceKind::Deposit,
                1 => AcceptanceKind::Repayment,
                t => return Err(DecodeError::Tag(t)),
            },
            limit: match r.u8()? {
                0 => Limit::Infinite,
                1 => Limit::Finite(Amount(r.u64()?)),
                t => return Err(DecodeError::Tag(t)),
            },
            currency: AssetCode::new(r.str()?)?,
            repayment_due: r.opt_date()?,
            ascertainment: None,
        }),
        TAG_TENDER => Intent::Tender(Tender {
            id: IntentId::new(r.str()?)?,
            sender: AgentId::new(r.str()?)?,
            source: AgentId::new(r.str()?)?,
            kind: match r.u8()? {
                0 => TenderKind::Assignment,
                1 => TenderKind::Overdraft,
                t => return Err(DecodeError::Tag(t)),
            },
            currency: AssetCode::new(r.str()?)?,
            max_amount: Amount(r.u64()?),
            price: match r.u8()? {
                0 => None,
                1 => Some(Price::new(r.u64()?, r.u64()?)),
                t => return Err(DecodeError::Tag(t)),
            },
            ascertainment: None,
        }),
        t => return Err(DecodeError::Tag(t)),
    };
    let rest = bytes.len() - r.pos;
    if rest != 0 {
        return Err(DecodeError::Trailing(rest));
    }
    Ok(intent)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_be_bytes());
    }
    fn str(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u32).to_be_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn opt_date(&mut self, d: Option<NaiveDate>) {
        match d {
            None => self.u8(0),
            Some(d) => {
                self.u8(1);
                self.str(&d.format("%Y-%m-%d").to_string());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, DecodeError> {
        let len = u32::from_be_bytes(self.take(4)?.try_into().unwrap()) as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::Utf8)
    }
    fn opt_date(&mut self) -> Result<Option<NaiveDate>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => {
                let s = self.str()?;
                NaiveDate::parse_from_str(&s, "%Y-%m-%d")
                    .map(Some)
                    .map_err(|_| DecodeError::Date(s))
            }
            t => Err(DecodeError::Tag(t)),
        }
    }
}
