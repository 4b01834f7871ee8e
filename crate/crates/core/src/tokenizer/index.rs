use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::Result;
use crate::tokenizer::{CodebookStack, ItemEmbedding, ItemId, SemanticId};

/// Prefix trie over the semantic IDs of a catalog. Several items may share
/// one full code; they are kept together in a collision list.
#[derive(Debug, Clone, Default)]
pub struct ItemIndex {
    levels: usize,
    children: HashMap<Vec<u32>, BTreeSet<u32>>,
    by_code: BTreeMap<SemanticId, Vec<ItemId>>,
    codes: BTreeMap<ItemId, SemanticId>,
}

impl ItemIndex {
    pub fn build(catalog: &[ItemEmbedding], stack: &CodebookStack) -> Result<Self> {
        let pairs = catalog
            .iter()
            .map(|e| Ok((e.id, stack.quantize(&e.vector)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_codes(stack.num_levels(), pairs))
    }

    pub fn from_codes(levels: usize, pairs: impl IntoIterator<Item = (ItemId, SemanticId)>) -> Self {
        let mut index = ItemIndex { levels, ..Default::default() };
        for (item, sid) in pairs {
            assert_eq!(sid.levels(), levels, "semantic id length");
            for l in 0..levels {
                index.children.entry(sid.0[..l].to_vec()).or_default().insert(sid.0[l]);
            }
            index.by_code.entry(sid.clone()).or_default().push(item);
            index.codes.insert(item, sid);
        }
        for items in index.by_code.values_mut() {
            items.sort();
        }
        index
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn num_items(&self) -> usize {
        self.codes.len()
    }

    /// Codes that extend `prefix` towards at least one catalog item.
    pub fn next_codes(&self, prefix: &[u32]) -> Option<&BTreeSet<u32>> {
        self.children.get(prefix)
    }

    pub fn allows(&self, prefix: &[u32], code: u32) -> bool {
        self.children.get(prefix).is_some_and(|s| s.contains(&code))
    }

    pub fn items_for(&self, sid: &SemanticId) -> &[ItemId] {
        self.by_code.get(sid).map_or(&[], |v| v.as_slice())
    }

    pub fn code_of(&self, item: ItemId) -> Option<&SemanticId> {
        self.codes.get(&item)
    }

    pub fn contains_code(&self, sid: &SemanticId) -> bool {
        self.by_code.contains_key(sid)
    }

    /// All items whose code starts with `prefix`, in ascending id order.
    pub fn items_with_prefix(&self, prefix: &[u32]) -> Vec<ItemId> {
        let mut out: Vec<ItemId> = self
            .by_code
            .iter()
            .filter(|(sid, _)| sid.0.starts_with(prefix))
            .flat_map(|(_, items)| items.iter().copied())
            .collect();
        out.sort();
        out
    }

    pub fn full_codes(&self) -> impl Iterator<Item = (&SemanticId, &[ItemId])> {
        self.by_code.iter().map(|(s, v)| (s, v.as_slice()))
    }

    pub fn item_codes(&self) -> impl Iterator<Item = (ItemId, &SemanticId)> {
        self.codes.iter().map(|(i, s)| (*i, s))
    }
}
