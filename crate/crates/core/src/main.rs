fn main() {
    std::process::exit(rd_toolkit::cli::main_exit_code());
}
