//! C ABI surface. Fleshed out once the core engine lands.
