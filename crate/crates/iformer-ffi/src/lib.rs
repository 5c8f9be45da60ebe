//! C ABI surface. Placeholder until the core model lands.
