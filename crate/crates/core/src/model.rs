//! Canonical post and feed types shared by every stage of the pipeline.
//!
//! Platform payloads are decoded into [`FeedPage`] by a [`crate::payload`]
//! adapter. Everything here is a plain value: cheap to clone, `Send + Sync`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch.
pub type Millis = i64;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(
    /// Opaque platform post identifier.
    PostId
);
string_id!(
    /// Study-assigned participant identifier.
    ParticipantId
);
string_id!(
    /// Client-chosen browsing session identifier.
    SessionId
);

/// Reserved id prefix for synthetic in-feed survey units.
pub const SURVEY_ID_PREFIX: &str = "survey:";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SocialMetrics {
    pub likes: u64,
    pub comments: u64,
    pub shares: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentKind {
    Link,
    Image,
    Video,
}

impl AttachmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttachmentKind::Link => "link",
            AttachmentKind::Image => "image",
            AttachmentKind::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub uri: String,
}

/// Where a post in a delivered feed came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Organic,
    Generated,
    Monitored,
    Transferred,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Organic => "organic",
            Provenance::Generated => "generated",
            Provenance::Monitored => "monitored",
            Provenance::Transferred => "transferred",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    #[default]
    Public,
    Restricted,
}

/// A payload field this crate does not interpret, kept as raw JSON text so it
/// can be re-emitted verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpaqueField {
    pub name: String,
    pub raw_json: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Post {
    pub id: PostId,
    pub author: String,
    pub text: String,
    pub created_at: Millis,
    pub metrics: SocialMetrics,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    #[serde(default)]
    pub provenance: Provenance,
    #[serde(default)]
    pub visibility: Visibility,
    /// Unknown payload fields, in payload order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<OpaqueField>,
}

impl Post {
    /// A public organic post with no attachments.
    pub fn new(id: impl Into<PostId>, author: impl Into<String>, text: impl Into<String>, created_at: Millis) -> Self {
        Self {
            id: id.into(),
            author: author.into(),
            text: text.into(),
            created_at,
            metrics: SocialMetrics::default(),
            attachments: Vec::new(),
            provenance: Provenance::Organic,
            visibility: Visibility::Public,
            extra: Vec::new(),
        }
    }

    pub fn with_metrics(mut self, likes: u64, comments: u64, shares: u64) -> Self {
        self.metrics = SocialMetrics { likes, comments, shares };
        self
    }

    pub fn with_attachment(mut self, kind: AttachmentKind, uri: impl Into<String>) -> Self {
        self.attachments.push(Attachment { kind, uri: uri.into() });
        self
    }

    pub fn is_survey_card(&self) -> bool {
        self.id.as_str().starts_with(SURVEY_ID_PREFIX)
    }
}

/// One page of posts in delivery order. Positions are the implicit indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedPage {
    pub cursor: String,
    pub posts: Vec<Post>,
    #[serde(default)]
    pub fetched_at: Option<Millis>,
    /// Unknown top-level payload fields, in payload order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<OpaqueField>,
}

impl FeedPage {
    pub fn new(cursor: impl Into<String>, posts: Vec<Post>) -> Self {
        Self { cursor: cursor.into(), posts, fetched_at: None, extra: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &PostId> {
        self.posts.iter().map(|p| &p.id)
    }

    /// First duplicated post id, if any.
    pub fn duplicate_id(&self) -> Option<&PostId> {
        let mut seen = std::collections::HashSet::with_capacity(self.posts.len());
        self.posts.iter().map(|p| &p.id).find(|id| !seen.insert(*id))
    }
}
