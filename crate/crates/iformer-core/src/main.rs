fn main() {
    iformer_core::cli::main_entry();
}
