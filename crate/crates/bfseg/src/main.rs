fn main() {
    std::process::exit(bfseg::cli_unimplemented());
}
