fn main() {
    std::process::exit(csfiqa::cli::main_exit_code());
}
