//! Schema-aware denoising for sequence-to-sequence text-to-SQL.
//!
//! The crate covers the whole pipeline: query/schema formulation ([`sql`]),
//! corpora ([`data`]), denoising augmentation ([`noising`]), the closed
//! target vocabulary ([`vocab`]), a transformer with a hybrid
//! pointer-generator head ([`model`]), query execution ([`executor`]),
//! execution-guided decoding ([`eg`]) and evaluation ([`eval`]).

pub mod data;
pub mod eg;
pub mod eval;
pub mod executor;
pub mod model;
pub mod noising;
pub mod sql;
pub mod vocab;
