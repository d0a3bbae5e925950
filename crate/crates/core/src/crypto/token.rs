//! Compact JWT-style tokens signed with EdDSA (Ed25519).
//!
//! `base64url(header) . base64url(claims) . base64url(signature)`, unpadded.
//! Timestamps are milliseconds on the fabric clock.

use std::fmt;
use std::str::FromStr;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::keys::{SigningKeyPair, VerifyingKey};
use super::CryptoError;
use crate::ids::{Millis, NodeId, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    alg: String,
    typ: String,
}

impl Header {
    fn eddsa() -> Self {
        Header {
            alg: "EdDSA".into(),
            typ: "JWT".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenClaims {
    pub sub: NodeId,
    pub iat: Millis,
    pub exp: Millis,
    pub role: Role,
    #[serde(default)]
    pub perms: Vec<String>,
}

/// A signed token as carried on the wire, plus its decoded claims.
#[derive(Clone, PartialEq, Eq)]
pub struct AuthToken {
    compact: String,
    claims: TokenClaims,
}

impl AuthToken {
    pub fn subject(&self) -> NodeId {
        self.claims.sub
    }
    pub fn issued_at(&self) -> Millis {
        self.claims.iat
    }
    pub fn expires_at(&self) -> Millis {
        self.claims.exp
    }
    pub fn claims(&self) -> &TokenClaims {
        &self.claims
    }
    pub fn as_str(&self) -> &str {
        &self.compact
    }
    pub fn ttl(&self) -> Millis {
        self.claims.exp - self.claims.iat
    }
    /// Instant at which a holder should re-authenticate (80% of the lifetime).
    pub fn refresh_at(&self) -> Millis {
        self.claims.iat + self.ttl() * 4 / 5
    }
}

impl fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuthToken").field("claims", &self.claims).finish()
    }
}

impl fmt::Display for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.compact)
    }
}

impl FromStr for AuthToken {
    type Err = CryptoError;

    /// Parses without verifying the signature.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (_, claims, _) = split(s)?;
        Ok(AuthToken {
            compact: s.to_string(),
            claims,
        })
    }
}

impl Serialize for AuthToken {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.compact)
    }
}

impl<'de> Deserialize<'de> for AuthToken {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRejection {
    Expired,
    BadSignature,
    Malformed,
}

impl fmt::Display for TokenRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenRejection::Expired => "expired",
            TokenRejection::BadSignature => "invalid signature",
            TokenRejection::Malformed => "malformed",
        })
    }
}

fn malformed() -> CryptoError {
    CryptoError::Token(TokenRejection::Malformed)
}

fn decode_segment(seg: &str) -> Result<Vec<u8>, CryptoError> {
    let bytes = URL_SAFE_NO_PAD.decode(seg).map_err(|_| malformed())?;
    // reject alternative encodings of the same bytes
    if URL_SAFE_NO_PAD.encode(&bytes) != seg {
        return Err(malformed());
    }
    Ok(bytes)
}

fn split(s: &str) -> Result<(Vec<u8>, TokenClaims, Vec<u8>), CryptoError> {
    let mut parts = s.split('.');
    let (h, c, sig) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(h), Some(c), Some(sig), None) => (h, c, sig),
        _ => return Err(malformed()),
    };
    let header_bytes = decode_segment(h)?;
    let claims_bytes = decode_segment(c)?;
    let signature = decode_segment(sig)?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|_| malformed())?;
    if header != Header::eddsa() {
        return Err(malformed());
    }
    let claims: TokenClaims = serde_json::from_slice(&claims_bytes).map_err(|_| malformed())?;
    if claims.exp <= claims.iat {
        return Err(malformed());
    }
    Ok((format!("{h}.{c}").into_bytes(), claims, signature))
}

pub fn issue_token(
    subject: NodeId,
    role: Role,
    perms: Vec<String>,
    issued_at: Millis,
    ttl: Millis,
    signer: &SigningKeyPair,
) -> Result<AuthToken, CryptoError> {
    if ttl == 0 {
        return Err(CryptoError::Config("token ttl must be positive".into()));
    }
    let claims = TokenClaims {
        sub: subject,
        iat: issued_at,
        exp: issued_at
            .checked_add(ttl)
            .ok_or_else(|| CryptoError::Config("token expiry overflows".into()))?,
        role,
        perms,
    };
    let header = serde_json::to_vec(&Header::eddsa()).expect("header serializes");
    let body = serde_json::to_vec(&claims).expect("claims serialize");
    let signing_input = format!(
        "{}.{}",
        URL_SAFE_NO_PAD.encode(header),
        URL_SAFE_NO_PAD.encode(body)
    );
    let sig = signer.sign(signing_input.as_bytes());
    Ok(AuthToken {
        compact: format!("{signing_input}.{}", URL_SAFE_NO_PAD.encode(sig)),
        claims,
    })
}

/// Checks structure, then signature, then expiry (`now < exp`).
pub fn verify_token(
    token: &str,
    controller: &VerifyingKey,
    now: Millis,
) -> Result<TokenClaims, TokenRejection> {
    let (signing_input, claims, sig) = split(token).map_err(|_| TokenRejection::Malformed)?;
    controller
        .verify(&signing_input, &sig)
        .map_err(|_| TokenRejection::BadSignature)?;
    if now >= claims.exp {
        return Err(TokenRejection::Expired);
    }
    Ok(claims)
}
