//! Payload adapters between platform wire bytes and [`FeedPage`].
//!
//! The bundled `mock-v1` format is a single compact JSON document:
//!
//! ```text
//! {"cursor":"..","posts":[{"id":"..","author":"..","text":"..","created_at":0,
//!   "likes":0,"comments":0,"shares":0,"attachments":[{"kind":"link","uri":".."}]}]}
//! ```
//!
//! Known fields are written in that order. `provenance` and `visibility` are
//! written only when they differ from `organic` / `public`. Unknown fields are
//! kept verbatim and re-emitted after the known ones, so any payload produced
//! by [`MockFormat::serialize`] parses and re-serializes to identical bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::value::RawValue;
use thiserror::Error;

use crate::model::{Attachment, AttachmentKind, FeedPage, OpaqueField, Post, PostId, Provenance, SocialMetrics, Visibility};

pub const MOCK_FORMAT_ID: &str = "mock-v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("unknown payload format `{0}`")]
    UnknownFormat(String),
    #[error("malformed payload at byte {offset}: {reason}")]
    MalformedPayload { offset: usize, reason: String },
}

impl PayloadError {
    fn malformed(offset: usize, reason: impl Into<String>) -> Self {
        PayloadError::MalformedPayload { offset, reason: reason.into() }
    }
}

pub trait PayloadFormat: Send + Sync {
    fn id(&self) -> &str;
    fn parse(&self, raw: &[u8]) -> Result<FeedPage, PayloadError>;
    fn serialize(&self, page: &FeedPage) -> Vec<u8>;
}

/// Registered payload adapters keyed by format id.
#[derive(Clone)]
pub struct FormatRegistry {
    formats: BTreeMap<String, Arc<dyn PayloadFormat>>,
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut reg = Self { formats: BTreeMap::new() };
        reg.register(Arc::new(MockFormat));
        reg
    }
}

impl fmt::Debug for FormatRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.formats.keys()).finish()
    }
}

impl FormatRegistry {
    pub fn register(&mut self, format: Arc<dyn PayloadFormat>) {
        self.formats.insert(format.id().to_owned(), format);
    }

    pub fn get(&self, format_id: &str) -> Result<&Arc<dyn PayloadFormat>, PayloadError> {
        self.formats.get(format_id).ok_or_else(|| PayloadError::UnknownFormat(format_id.to_owned()))
    }

    pub fn parse(&self, raw: &[u8], format_id: &str) -> Result<FeedPage, PayloadError> {
        self.get(format_id)?.parse(raw)
    }

    pub fn serialize(&self, page: &FeedPage, format_id: &str) -> Result<Vec<u8>, PayloadError> {
        Ok(self.get(format_id)?.serialize(page))
    }
}

/// Parses with the default registry.
pub fn parse_feed_payload(raw: &[u8], format_id: &str) -> Result<FeedPage, PayloadError> {
    FormatRegistry::default().parse(raw, format_id)
}

/// Serializes with the default registry.
pub fn serialize_feed_payload(page: &FeedPage, format_id: &str) -> Result<Vec<u8>, PayloadError> {
    FormatRegistry::default().serialize(page, format_id)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockFormat;

impl PayloadFormat for MockFormat {
    fn id(&self) -> &str {
        MOCK_FORMAT_ID
    }

    fn parse(&self, raw: &[u8]) -> Result<FeedPage, PayloadError> {
        let text = std::str::from_utf8(raw)
            .map_err(|e| PayloadError::malformed(e.valid_up_to(), "payload is not valid UTF-8"))?;
        let ctx = Ctx { base: text };
        let top: Fields<'_> = serde_json::from_str(text).map_err(|e| ctx.from_serde(&e))?;
        ctx.page(top)
    }

    fn serialize(&self, page: &FeedPage) -> Vec<u8> {
        let mut out = String::with_capacity(256 + page.posts.len() * 256);
        out.push_str("{\"cursor\":");
        push_json_str(&mut out, &page.cursor);
        out.push_str(",\"posts\":[");
        for (i, post) in page.posts.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write_post(&mut out, post);
        }
        out.push(']');
        write_extra(&mut out, &page.extra);
        out.push('}');
        out.into_bytes()
    }
}

fn push_json_str(out: &mut String, s: &str) {
    // serde_json string escaping cannot fail.
    out.push_str(&serde_json::to_string(s).expect("string serialization"));
}

fn write_extra(out: &mut String, extra: &[OpaqueField]) {
    for field in extra {
        out.push(',');
        push_json_str(out, &field.name);
        out.push(':');
        out.push_str(&field.raw_json);
    }
}

fn write_post(out: &mut String, post: &Post) {
    use std::fmt::Write;
    out.push_str("{\"id\":");
    push_json_str(out, post.id.as_str());
    out.push_str(",\"author\":");
    push_json_str(out, &post.author);
    out.push_str(",\"text\":");
    push_json_str(out, &post.text);
    let m = post.metrics;
    let _ = write!(
        out,
        ",\"created_at\":{},\"likes\":{},\"comments\":{},\"shares\":{},\"attachments\":[",
        post.created_at, m.likes, m.comments, m.shares
    );
    for (i, a) in post.attachments.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str("{\"kind\":\"");
        out.push_str(a.kind.as_str());
        out.push_str("\",\"uri\":");
        push_json_str(out, &a.uri);
        out.push('}');
    }
    out.push(']');
    if post.provenance != Provenance::Organic {
        out.push_str(",\"provenance\":\"");
        out.push_str(post.provenance.as_str());
        out.push('"');
    }
    if post.visibility == Visibility::Restricted {
        out.push_str(",\"visibility\":\"restricted\"");
    }
    write_extra(out, &post.extra);
    out.push('}');
}

/// An object's members in document order, values left unparsed.
struct Fields<'a>(Vec<(String, &'a RawValue)>);

impl<'de: 'a, 'a> Deserialize<'de> for Fields<'a> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V<'a>(std::marker::PhantomData<&'a ()>);
        impl<'de: 'a, 'a> Visitor<'de> for V<'a> {
            type Value = Fields<'a>;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> Result<Fields<'a>, M::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, &'de RawValue>()? {
                    out.push((k, v));
                }
                Ok(Fields(out))
            }
        }
        d.deserialize_map(V(std::marker::PhantomData))
    }
}

struct Ctx<'a> {
    base: &'a str,
}

impl<'a> Ctx<'a> {
    fn offset_of(&self, v: &RawValue) -> usize {
        (v.get().as_ptr() as usize).saturating_sub(self.base.as_ptr() as usize)
    }

    fn from_serde(&self, e: &serde_json::Error) -> PayloadError {
        // serde_json reports 1-based line and byte column.
        let mut offset = 0usize;
        for (i, line) in self.base.split_inclusive('\n').enumerate() {
            if i + 1 == e.line() {
                offset += e.column().saturating_sub(1);
                break;
            }
            offset += line.len();
        }
        PayloadError::malformed(offset.min(self.base.len()), e.to_string())
    }

    fn typed<T: for<'de> Deserialize<'de>>(&self, v: &RawValue, what: &str) -> Result<T, PayloadError> {
        serde_json::from_str(v.get())
            .map_err(|e| PayloadError::malformed(self.offset_of(v), format!("field `{what}`: {e}")))
    }

    fn page(&self, top: Fields<'a>) -> Result<FeedPage, PayloadError> {
        let mut cursor = None;
        let mut posts_raw = None;
        let mut extra = Vec::new();
        let mut seen = HashSet::new();
        for (name, v) in top.0 {
            if !seen.insert(name.clone()) {
                return Err(PayloadError::malformed(self.offset_of(v), format!("duplicate field `{name}`")));
            }
            match name.as_str() {
                "cursor" => cursor = Some(self.typed::<String>(v, "cursor")?),
                "posts" => posts_raw = Some(v),
                _ => extra.push(OpaqueField { name, raw_json: v.get().to_owned() }),
            }
        }
        let cursor = cursor.ok_or_else(|| PayloadError::malformed(0, "missing field `cursor`"))?;
        let posts_raw = posts_raw.ok_or_else(|| PayloadError::malformed(0, "missing field `posts`"))?;
        let items: Vec<&RawValue> = serde_json::from_str(posts_raw.get())
            .map_err(|e| PayloadError::malformed(self.offset_of(posts_raw), format!("field `posts`: {e}")))?;
        let mut posts = Vec::with_capacity(items.len());
        let mut ids = HashSet::with_capacity(items.len());
        for item in items {
            let post = self.post(item)?;
            if !ids.insert(post.id.clone()) {
                return Err(PayloadError::malformed(self.offset_of(item), format!("duplicate post id `{}`", post.id)));
            }
            posts.push(post);
        }
        Ok(FeedPage { cursor, posts, fetched_at: None, extra })
    }

    fn post(&self, item: &'a RawValue) -> Result<Post, PayloadError> {
        let fields: Fields<'a> = serde_json::from_str(item.get())
            .map_err(|e| PayloadError::malformed(self.offset_of(item), format!("post: {e}")))?;
        let mut id = None;
        let mut author = None;
        let mut text = None;
        let mut created_at = None;
        let mut metrics = [None::<u64>; 3];
        let mut attachments = None;
        let mut provenance = Provenance::Organic;
        let mut visibility = Visibility::Public;
        let mut extra = Vec::new();
        let mut seen = HashSet::new();
        for (name, v) in fields.0 {
            if !seen.insert(name.clone()) {
                return Err(PayloadError::malformed(self.offset_of(v), format!("duplicate field `{name}`")));
            }
            match name.as_str() {
                "id" => id = Some(self.typed::<String>(v, "id")?),
                "author" => author = Some(self.typed::<String>(v, "author")?),
                "text" => text = Some(self.typed::<String>(v, "text")?),
                "created_at" => created_at = Some(self.typed::<u64>(v, "created_at")?),
                "likes" => metrics[0] = Some(self.typed::<u64>(v, "likes")?),
                "comments" => metrics[1] = Some(self.typed::<u64>(v, "comments")?),
                "shares" => metrics[2] = Some(self.typed::<u64>(v, "shares")?),
                "attachments" => attachments = Some(self.attachments(v)?),
                "provenance" => provenance = self.typed::<Provenance>(v, "provenance")?,
                "visibility" => visibility = self.typed::<Visibility>(v, "visibility")?,
                _ => extra.push(OpaqueField { name, raw_json: v.get().to_owned() }),
            }
        }
        let at = self.offset_of(item);
        let missing = |f: &str| PayloadError::malformed(at, format!("post missing field `{f}`"));
        let created_at = created_at.ok_or_else(|| missing("created_at"))?;
        let created_at = i64::try_from(created_at).map_err(|_| PayloadError::malformed(at, "created_at out of range"))?;
        Ok(Post {
            id: PostId(id.ok_or_else(|| missing("id"))?),
            author: author.ok_or_else(|| missing("author"))?,
            text: text.ok_or_else(|| missing("text"))?,
            created_at,
            metrics: SocialMetrics {
                likes: metrics[0].ok_or_else(|| missing("likes"))?,
                comments: metrics[1].ok_or_else(|| missing("comments"))?,
                shares: metrics[2].ok_or_else(|| missing("shares"))?,
            },
            attachments: attachments.ok_or_else(|| missing("attachments"))?,
            provenance,
            visibility,
            extra,
        })
    }

    fn attachments(&self, v: &'a RawValue) -> Result<Vec<Attachment>, PayloadError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Wire {
            kind: AttachmentKind,
            uri: String,
        }
        let items: Vec<&RawValue> = self.typed_borrowed(v)?;
        items
            .into_iter()
            .map(|item| {
                let w: Wire = self.typed(item, "attachments")?;
                Ok(Attachment { kind: w.kind, uri: w.uri })
            })
            .collect()
    }

    fn typed_borrowed(&self, v: &'a RawValue) -> Result<Vec<&'a RawValue>, PayloadError> {
        serde_json::from_str(v.get())
            .map_err(|e| PayloadError::malformed(self.offset_of(v), format!("field `attachments`: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeedPage {
        FeedPage::new(
            "c1",
            vec![
                Post::new("p0", "a0", "first post", 10).with_metrics(5, 1, 0),
                Post::new("p1", "a1", "second \"quoted\" é", 20)
                    .with_metrics(0, 0, 0)
                    .with_attachment(AttachmentKind::Video, "https://v/1"),
                Post::new("p2", "a0", "third", 30).with_metrics(100, 7, 3),
            ],
        )
    }

    #[test]
    fn three_posts_keep_payload_order() {
        let bytes = MockFormat.serialize(&sample());
        let page = parse_feed_payload(&bytes, MOCK_FORMAT_ID).unwrap();
        let ids: Vec<_> = page.ids().map(|id| id.as_str()).collect();
        assert_eq!(ids, ["p0", "p1", "p2"]);
        assert_eq!(page.posts[1].attachments[0].kind, AttachmentKind::Video);
    }

    #[test]
    fn golden_bytes() {
        let page = FeedPage::new("c", vec![Post::new("p0", "a", "t", 1).with_metrics(0, 2, 3)]);
        let bytes = MockFormat.serialize(&page);
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"cursor":"c","posts":[{"id":"p0","author":"a","text":"t","created_at":1,"likes":0,"comments":2,"shares":3,"attachments":[]}]}"#
        );
    }

    #[test]
    fn empty_page() {
        let page = parse_feed_payload(br#"{"cursor":"","posts":[]}"#, MOCK_FORMAT_ID).unwrap();
        assert!(page.is_empty());
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let bytes = MockFormat.serialize(&sample());
        let cut = &bytes[..bytes.len() - 7];
        match parse_feed_payload(cut, MOCK_FORMAT_ID) {
            Err(PayloadError::MalformedPayload { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected MalformedPayload, got {other:?}"),
        }
    }

    #[test]
    fn unknown_format() {
        assert_eq!(
            parse_feed_payload(b"{}", "x-timeline").unwrap_err(),
            PayloadError::UnknownFormat("x-timeline".into())
        );
    }

    #[test]
    fn string_count_is_not_coerced() {
        let raw = br#"{"cursor":"","posts":[{"id":"p","author":"a","text":"t","created_at":1,"likes":"12","comments":0,"shares":0,"attachments":[]}]}"#;
        match parse_feed_payload(raw, MOCK_FORMAT_ID) {
            Err(PayloadError::MalformedPayload { offset, reason }) => {
                assert_eq!(&raw[offset..offset + 4], b"\"12\"");
                assert!(reason.contains("likes"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_count_is_malformed() {
        let raw = br#"{"cursor":"","posts":[{"id":"p","author":"a","text":"t","created_at":1,"likes":-1,"comments":0,"shares":0,"attachments":[]}]}"#;
        assert!(matches!(parse_feed_payload(raw, MOCK_FORMAT_ID), Err(PayloadError::MalformedPayload { .. })));
    }

    #[test]
    fn duplicate_post_id_is_malformed() {
        let raw = br#"{"cursor":"","posts":[{"id":"p","author":"a","text":"t","created_at":1,"likes":1,"comments":0,"shares":0,"attachments":[]},{"id":"p","author":"a","text":"t","created_at":1,"likes":1,"comments":0,"shares":0,"attachments":[]}]}"#;
        assert!(matches!(parse_feed_payload(raw, MOCK_FORMAT_ID), Err(PayloadError::MalformedPayload { .. })));
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let raw = br#"{"cursor":"x","posts":[{"id":"p","author":"a","text":"t","created_at":1,"likes":1,"comments":0,"shares":0,"attachments":[],"promoted":{"ad":false,"n":[1,2]}}],"server_hint":"abc"}"#;
        let page = parse_feed_payload(raw, MOCK_FORMAT_ID).unwrap();
        assert_eq!(page.posts[0].extra[0].name, "promoted");
        assert_eq!(MockFormat.serialize(&page), raw.to_vec());
    }

    #[test]
    fn non_default_provenance_is_emitted() {
        let mut post = Post::new("g", "study", "hi", 1);
        post.provenance = Provenance::Generated;
        post.visibility = Visibility::Restricted;
        let bytes = MockFormat.serialize(&FeedPage::new("", vec![post.clone()]));
        let back = parse_feed_payload(&bytes, MOCK_FORMAT_ID).unwrap();
        assert_eq!(back.posts[0], post);
    }
}
