"""Synthetic e-commerce seed environment.

The desk-scale seed has 8 databases, 42 attribute nodes and 17 tools. The
paper-scale variant adds five more databases and enough generated accessor
tools to reach 64 nodes and 51 tools.
"""

from __future__ import annotations

from dataclasses import dataclass

from .graph import READ, WRITE, AttributeNode, EnvGraph, NodeId, RelationEdge, ToolSpec

SEED_VERSION = "G0"

# database -> [(attribute, type, flags, allowed_values)]; flags: P=primary, F=foreign, R=read-only
_DESK_SCHEMA: dict[str, list[tuple]] = {
    "User": [
        ("user_id", "string", "PR", None),
        ("name", "string", "", None),
        ("email", "string", "", None),
        ("address", "string", "", None),
        ("cart_id", "optional[string]", "F", None),
        ("membership", "string", "", ("regular", "gold", "platinum")),
    ],
    "Product": [
        ("product_id", "string", "PR", None),
        ("title", "string", "", None),
        ("price", "float", "", None),
        ("category", "string", "", ("apparel", "electronics", "home", "sports")),
        ("variants", "list[string]", "", None),
        ("stock", "integer", "", None),
    ],
    "Order": [
        ("order_id", "string", "PR", None),
        ("user_id", "string", "FR", None),
        ("product_ids", "list[string]", "F", None),
        ("order_items", "list[string]", "", None),
        ("status", "string", "", ("pending", "shipped", "delivered", "cancelled")),
        ("total", "float", "", None),
        ("exchange_request_ids", "list[string]", "F", None),
    ],
    "Cart": [
        ("cart_id", "string", "PR", None),
        ("user_id", "string", "FR", None),
        ("items", "list[string]", "F", None),
        ("created_at", "string", "R", None),
        ("updated_at", "string", "", None),
    ],
    "CartItem": [
        ("cart_item_id", "string", "PR", None),
        ("product_id", "string", "F", None),
        ("quantity", "integer", "", None),
        ("variant", "string", "", None),
    ],
    "ExchangeRequest": [
        ("request_id", "string", "PR", None),
        ("order_id", "string", "FR", None),
        ("new_variant", "string", "", None),
        ("status", "string", "", ("requested", "approved", "completed")),
        ("refund_amount", "float", "", None),
    ],
    "Review": [
        ("review_id", "string", "PR", None),
        ("user_id", "string", "FR", None),
        ("product_id", "string", "FR", None),
        ("rating", "integer", "", None),
        ("comment", "string", "", None),
    ],
    "Payment": [
        ("payment_id", "string", "PR", None),
        ("order_id", "string", "FR", None),
        ("method", "string", "", ("card", "paypal", "gift_card")),
        ("amount", "float", "", None),
    ],
}

_FULL_EXTRA_SCHEMA: dict[str, list[tuple]] = {
    "Address": [
        ("address_id", "string", "PR", None),
        ("user_id", "string", "FR", None),
        ("street", "string", "", None),
        ("city", "string", "", None),
        ("zip_code", "string", "", None),
    ],
    "Wishlist": [
        ("wishlist_id", "string", "PR", None),
        ("user_id", "string", "FR", None),
        ("product_ids", "list[string]", "F", None),
        ("name", "string", "", None),
    ],
    "Subscription": [
        ("subscription_id", "string", "PR", None),
        ("user_id", "string", "FR", None),
        ("product_id", "string", "F", None),
        ("frequency", "string", "", ("weekly", "monthly", "quarterly")),
        ("status", "string", "", ("active", "paused", "cancelled")),
    ],
    "Coupon": [
        ("coupon_code", "string", "PR", None),
        ("discount_percent", "float", "", None),
        ("active", "boolean", "", None),
    ],
    "Shipment": [
        ("shipment_id", "string", "PR", None),
        ("order_id", "string", "FR", None),
        ("carrier", "string", "", ("ups", "fedex", "usps")),
        ("tracking_number", "string", "", None),
        ("status", "string", "", ("label_created", "in_transit", "delivered")),
    ],
}

# (source, target, relationship, cardinality)
_DESK_LINKS = [
    ("User.cart_id", "Cart.cart_id", "references", "one-to-one"),
    ("Order.user_id", "User.user_id", "belongs_to", "many-to-one"),
    ("Order.product_ids", "Product.product_id", "references", "many-to-many"),
    ("Order.exchange_request_ids", "ExchangeRequest.request_id", "contains", "one-to-many"),
    ("Cart.user_id", "User.user_id", "belongs_to", "one-to-one"),
    ("Cart.items", "CartItem.cart_item_id", "contains", "one-to-many"),
    ("CartItem.product_id", "Product.product_id", "references", "many-to-one"),
    ("ExchangeRequest.order_id", "Order.order_id", "belongs_to", "many-to-one"),
    ("Review.user_id", "User.user_id", "belongs_to", "many-to-one"),
    ("Review.product_id", "Product.product_id", "references", "many-to-one"),
    ("Payment.order_id", "Order.order_id", "belongs_to", "many-to-one"),
]

_DESK_TOOL_EDGES = [
    ("User.email", "User.user_id", "identifies", "one-to-one"),
    ("User.user_id", "Order.order_id", "used_for", "one-to-many"),
    ("Order.order_id", "Product.product_id", "contains", "many-to-many"),
    ("Product.category", "Product.product_id", "identifies", "one-to-many"),
    ("User.user_id", "Cart.items", "used_for", "one-to-one"),
    ("Product.product_id", "Cart.items", "updates", "many-to-many"),
    ("Product.product_id", "Review.review_id", "contains", "one-to-many"),
    ("Order.order_id", "Payment.payment_id", "contains", "one-to-many"),
]

# name, kind, inputs, outputs, description, edges it rides on (None = has_attribute edges from the input PK)
_DESK_TOOLS = [
    ("authenticate_user", READ, ["User.email"], ["User.user_id", "User.name"],
     "Look up a customer account by email address.", [("User.email", "User.user_id")]),
    ("get_user_details", READ, ["User.user_id"], ["User.name", "User.email", "User.address", "User.membership"],
     "Fetch a customer's profile.", None),
    ("get_user_orders", READ, ["User.user_id"], ["Order.order_id", "Order.status"],
     "List a customer's orders with their status.", [("User.user_id", "Order.order_id")]),
    ("get_order_by_id", READ, ["Order.order_id"], ["Order.status", "Order.order_items", "Order.product_ids", "Order.total"],
     "Fetch an order's details.", None),
    ("get_order_products", READ, ["Order.order_id"], ["Product.product_id", "Product.title"],
     "List the products contained in an order.", [("Order.order_id", "Product.product_id")]),
    ("get_product_details", READ, ["Product.product_id"], ["Product.title", "Product.price", "Product.variants", "Product.stock"],
     "Fetch a product's catalogue entry.", None),
    ("search_products", READ, ["Product.category"], ["Product.product_id", "Product.title"],
     "Find products in a category.", [("Product.category", "Product.product_id")]),
    ("get_cart", READ, ["User.user_id"], ["Cart.cart_id", "Cart.items"],
     "Fetch a customer's shopping cart.", [("User.user_id", "Cart.items"), ("Cart.user_id", "User.user_id")]),
    ("add_to_cart", WRITE, ["User.user_id", "Product.product_id"], ["Cart.cart_id", "Cart.items"],
     "Add a product to the customer's cart.",
     [("Product.product_id", "Cart.items"), ("User.user_id", "Cart.items"), ("Cart.user_id", "User.user_id")]),
    ("update_cart_item", WRITE, ["User.user_id", "CartItem.cart_item_id", "CartItem.quantity"],
     ["CartItem.cart_item_id", "CartItem.quantity"], "Change the quantity of a cart line.",
     [("Cart.items", "CartItem.cart_item_id")]),
    ("remove_from_cart", WRITE, ["User.user_id", "CartItem.cart_item_id"], ["CartItem.cart_item_id", "CartItem.quantity"],
     "Remove a line from the cart.", [("Cart.items", "CartItem.cart_item_id")]),
    ("clear_cart", WRITE, ["User.user_id"], ["Cart.cart_id", "Cart.items"],
     "Empty the customer's cart.", [("User.user_id", "Cart.items"), ("Cart.user_id", "User.user_id")]),
    ("initiate_exchange", WRITE, ["Order.order_id", "ExchangeRequest.new_variant"],
     ["ExchangeRequest.request_id", "ExchangeRequest.status", "ExchangeRequest.new_variant"],
     "Open an exchange request for an order.",
     [("ExchangeRequest.order_id", "Order.order_id"), ("Order.exchange_request_ids", "ExchangeRequest.request_id")]),
    ("get_exchange_status", READ, ["ExchangeRequest.request_id"],
     ["ExchangeRequest.status", "ExchangeRequest.refund_amount", "ExchangeRequest.order_id"],
     "Check an exchange request.", None),
    ("write_review", WRITE, ["User.user_id", "Product.product_id", "Review.rating", "Review.comment"],
     ["Review.review_id", "Review.rating", "Review.comment"], "Post a product review.",
     [("Review.user_id", "User.user_id"), ("Review.product_id", "Product.product_id")]),
    ("get_product_reviews", READ, ["Product.product_id"], ["Review.review_id", "Review.rating", "Review.comment"],
     "List the reviews of a product.", [("Product.product_id", "Review.review_id")]),
    ("get_order_payment", READ, ["Order.order_id"], ["Payment.payment_id", "Payment.method", "Payment.amount"],
     "Fetch the payment attached to an order.", [("Order.order_id", "Payment.payment_id"), ("Payment.order_id", "Order.order_id")]),
]

_FULL_EXTRA_LINKS = [
    ("Address.user_id", "User.user_id", "belongs_to", "many-to-one"),
    ("Wishlist.user_id", "User.user_id", "belongs_to", "many-to-one"),
    ("Wishlist.product_ids", "Product.product_id", "references", "many-to-many"),
    ("Subscription.user_id", "User.user_id", "belongs_to", "many-to-one"),
    ("Subscription.product_id", "Product.product_id", "references", "many-to-one"),
    ("Shipment.order_id", "Order.order_id", "belongs_to", "many-to-one"),
]

# databases whose non-key attributes must stay edge-free (Cart timestamps are bare data points)
_BARE_ATTRIBUTES = {"Cart.created_at", "Cart.updated_at", "Cart.user_id", "Cart.items"}


def _node(db: str, attr: str, vtype: str, flags: str, allowed) -> AttributeNode:
    return AttributeNode(
        id=NodeId(db, attr),
        value_type=vtype,
        description=f"{attr.replace('_', ' ')} of the {db} record",
        is_primary_key="P" in flags,
        is_foreign_key="F" in flags,
        modifiable="R" not in flags,
        allowed_values=tuple(allowed) if allowed else None,
    )


@dataclass
class _Builder:
    nodes: dict
    edges: dict
    tools: dict

    def edge(self, src: str, dst: str, rel: str, card: str, description: str = "") -> None:
        s, t = NodeId.parse(src), NodeId.parse(dst)
        key = (s, t, rel)
        if key not in self.edges:
            self.edges[key] = RelationEdge(s, t, rel, card, (), description or f"{src} {rel.replace('_', ' ')} {dst}")

    def attach(self, tool: str, src: str, dst: str) -> None:
        s, t = NodeId.parse(src), NodeId.parse(dst)
        for key, e in self.edges.items():
            if key[0] == s and key[1] == t:
                if tool not in e.tools:
                    self.edges[key] = RelationEdge(e.source, e.target, e.relationship_type, e.cardinality,
                                                   tuple(sorted(e.tools + (tool,))), e.description)
                return
        raise KeyError(f"no edge {src} -> {dst} for {tool}")

    def tool(self, name, kind, inputs, outputs, description, rides) -> None:
        spec = ToolSpec(name, kind, tuple(map(NodeId.parse, inputs)), tuple(map(NodeId.parse, outputs)), description)
        self.tools[name] = spec
        if rides is None:
            pk = spec.inputs[0]
            rides = [(str(pk), str(o)) for o in spec.outputs]
        for src, dst in rides:
            self.attach(name, src, dst)


def _add_schema(b: _Builder, schema: dict[str, list[tuple]]) -> None:
    for db, attrs in schema.items():
        pk = None
        for attr, vtype, flags, allowed in attrs:
            n = _node(db, attr, vtype, flags, allowed)
            b.nodes[n.id] = n
            if n.is_primary_key:
                pk = n.id
        for attr, *_ in attrs:
            nid = NodeId(db, attr)
            if nid == pk or f"{db}.{attr}" in _BARE_ATTRIBUTES:
                continue
            b.edge(str(pk), str(nid), "has_attribute", "one-to-one")
    if "Cart" in schema:
        b.edge("Cart.cart_id", "Cart.user_id", "has_attribute", "one-to-one")
        b.edge("Cart.cart_id", "Cart.items", "has_attribute", "one-to-many")


def _crud_tools(b: _Builder, db: str, parent_fk: str | None) -> list[tuple]:
    """Read/list/create tool rows for a database added at paper scale."""
    nodes = [n for n in b.nodes.values() if n.database == db]
    pk = next(n for n in nodes if n.is_primary_key)
    data = [n for n in nodes if not n.is_primary_key and not n.is_foreign_key]
    snake = "".join("_" + c.lower() if c.isupper() else c for c in db).lstrip("_")
    rows = [(f"get_{snake}_details", READ, [str(pk.id)], [str(n.id) for n in nodes if n is not pk], f"Fetch a {db} record.", None)]
    if parent_fk:
        fk = NodeId.parse(parent_fk)
        parent_pk = next(k[1] for k in b.edges if k[0] == fk)
        b.edge(str(parent_pk), str(pk.id), "contains", "one-to-many")
        rows.append((f"list_{snake}s", READ, [str(parent_pk)], [str(pk.id)] + [str(n.id) for n in data[:1]],
                     f"List {db} records of a {parent_pk.database}.", [(str(parent_pk), str(pk.id))]))
        rows.append((f"create_{snake}", WRITE, [str(parent_pk)] + [str(n.id) for n in data],
                     [str(pk.id)] + [str(n.id) for n in data], f"Create a {db} record.", [(parent_fk, str(parent_pk))]))
    return rows


def seed_graph(paper_scale: bool = False) -> EnvGraph:
    b = _Builder({}, {}, {})
    _add_schema(b, _DESK_SCHEMA)
    for src, dst, rel, card in _DESK_LINKS + _DESK_TOOL_EDGES:
        b.edge(src, dst, rel, card)
    for row in _DESK_TOOLS:
        b.tool(*row)
    if paper_scale:
        _add_schema(b, _FULL_EXTRA_SCHEMA)
        for src, dst, rel, card in _FULL_EXTRA_LINKS:
            b.edge(src, dst, rel, card)
        rows = []
        for db, fk in (("Address", "Address.user_id"), ("Wishlist", "Wishlist.user_id"),
                       ("Subscription", "Subscription.user_id"), ("Shipment", "Shipment.order_id"),
                       ("Coupon", None)):
            rows.extend(_crud_tools(b, db, fk))
        for row in rows:
            b.tool(*row)
        # single-attribute accessors fill the catalogue up to the seed's tool count
        for n in sorted(b.nodes.values(), key=lambda n: n.id):
            if len(b.tools) >= 51:
                break
            if n.is_primary_key or f"{n.id}" in _BARE_ATTRIBUTES:
                continue
            pk = next(m.id for m in b.nodes.values() if m.database == n.database and m.is_primary_key)
            name = f"get_{n.database.lower()}_{n.attribute}"
            if name in b.tools:
                continue
            b.tool(name, READ, [str(pk)], [str(n.id)], f"Read {n.id} for one record.", None)
    return EnvGraph.build(
        SEED_VERSION,
        b.nodes.values(),
        b.edges.values(),
        b.tools.values(),
        {"episode_id": "seed", "strategy": "seed", "parent": None, "scale": "paper" if paper_scale else "desk"},
    )


CART_TOOLS = ("add_to_cart", "clear_cart", "get_cart", "remove_from_cart", "update_cart_item")
