fn main() {
    std::process::exit(shardstore::cli::main());
}
