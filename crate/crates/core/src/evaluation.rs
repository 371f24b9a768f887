//! Placeholder, filled in module order.
